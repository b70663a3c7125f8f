//! The F0-conditioned autoencoder.
//!
//! Encoder: `[mel | speaker one-hot]` -> 3 x (conv5 -> ReLU -> batch norm)
//! -> 2 x BiLSTM(B) -> downsample by 16 (forward state at the last frame of
//! each window, backward state at the first).
//!
//! Decoder: upsampled code `[| speaker one-hot][| F0 one-hot]` -> linear
//! projection -> LSTM stack -> linear to 80 (`mel_pre`); the postnet (5
//! convolutions with batch norm, ReLU on all but the last) adds a residual to
//! give `mel_post`.
//!
//! Mel features are standardized by the global `mel_mean`/`mel_std` of the
//! config on the way in and mapped back on the way out, so every tensor the
//! caller sees is in log-amplitude units.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsp::{F0Contour, MelSpectrogram, MEL_BINS};
use crate::f0codec::{QuantizedF0, SpeakerF0Stats, F0_BINS, UNVOICED_BIN};
use crate::nn::{
    read_named_tensors, write_named_tensors, BatchNorm, BiLstm, Conv1d, Layout, Linear, Lstm,
    NnError, Pass, ParamStore, Tensor, Var,
};

pub const MODEL_MAGIC: [u8; 4] = *b"F0VC";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("frame count {frames} is not a multiple of {factor}")]
    NotMultiple { frames: usize, factor: usize },
    #[error("length mismatch: {what} has {got} frames, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("speaker index {index} out of range for {n} speakers")]
    Speaker { index: usize, n: usize },
    #[error("this model was configured {0} F0 conditioning")]
    F0Conditioning(&'static str),
    #[error("model has not been trained")]
    Untrained,
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mel_dim: usize,
    pub conv_channels: usize,
    pub n_enc_conv: usize,
    /// Bottleneck cell size B; the code carries 2B values per window.
    pub enc_cell: usize,
    pub downsample: usize,
    pub n_dec_lstm: usize,
    pub dec_cell: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub n_speakers: usize,
    pub f0_bins: usize,
    pub use_f0: bool,
    pub mel_mean: f64,
    pub mel_std: f64,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Full-size architecture.
    pub fn full_scale(n_speakers: usize) -> Self {
        Self {
            mel_dim: MEL_BINS,
            conv_channels: 512,
            n_enc_conv: 3,
            enc_cell: 16,
            downsample: 16,
            n_dec_lstm: 3,
            dec_cell: 512,
            postnet_layers: 5,
            postnet_channels: 512,
            n_speakers,
            f0_bins: F0_BINS,
            use_f0: true,
            mel_mean: 0.0,
            mel_std: 1.0,
            init_seed: 0,
        }
    }

    /// Narrow layers for single-core training runs; same topology.
    pub fn desk_scale(n_speakers: usize) -> Self {
        Self {
            conv_channels: 64,
            n_dec_lstm: 2,
            dec_cell: 128,
            postnet_channels: 64,
            ..Self::full_scale(n_speakers)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.mel_dim != MEL_BINS {
            return bad("mel_dim must be 80");
        }
        if self.downsample == 0 {
            return bad("downsample must be at least 1");
        }
        if self.use_f0 && self.f0_bins != F0_BINS {
            return bad("f0_bins must be 257 when F0 conditioning is on");
        }
        if self.n_speakers == 0
            || self.conv_channels == 0
            || self.enc_cell == 0
            || self.dec_cell == 0
            || self.n_enc_conv == 0
            || self.n_dec_lstm == 0
            || self.postnet_layers < 2
            || self.postnet_channels == 0
        {
            return bad("layer sizes and counts must be positive (postnet needs >= 2 layers)");
        }
        if !(self.mel_std > 0.0 && self.mel_std.is_finite() && self.mel_mean.is_finite()) {
            return bad("mel_std must be positive and finite");
        }
        Ok(())
    }

    pub fn code_dim(&self) -> usize {
        2 * self.enc_cell
    }

    pub fn decoder_input_dim(&self) -> usize {
        self.code_dim() + self.n_speakers + if self.use_f0 { self.f0_bins } else { 0 }
    }

    pub fn to_text(&self) -> String {
        format!(
            "mel_dim={}\nconv_channels={}\nn_enc_conv={}\nenc_cell={}\ndownsample={}\n\
             n_dec_lstm={}\ndec_cell={}\npostnet_layers={}\npostnet_channels={}\n\
             n_speakers={}\nf0_bins={}\nuse_f0={}\nmel_mean={:?}\nmel_std={:?}\ninit_seed={}\n",
            self.mel_dim,
            self.conv_channels,
            self.n_enc_conv,
            self.enc_cell,
            self.downsample,
            self.n_dec_lstm,
            self.dec_cell,
            self.postnet_layers,
            self.postnet_channels,
            self.n_speakers,
            self.f0_bins,
            self.use_f0,
            self.mel_mean,
            self.mel_std,
            self.init_seed
        )
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let mut cfg = Self::full_scale(1);
        let mut seen = 0;
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Format(format!("bad config line {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
            seen += 1;
        }
        if seen != 15 {
            return Err(ModelError::Format(format!("expected 15 config keys, found {seen}")));
        }
        Ok(cfg)
    }

    /// Sets one field from its textual value; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| ModelError::Config(format!("bad value {v:?} for {k}")))
        }
        match key {
            "mel_dim" => self.mel_dim = p(key, value)?,
            "conv_channels" => self.conv_channels = p(key, value)?,
            "n_enc_conv" => self.n_enc_conv = p(key, value)?,
            "enc_cell" => self.enc_cell = p(key, value)?,
            "downsample" => self.downsample = p(key, value)?,
            "n_dec_lstm" => self.n_dec_lstm = p(key, value)?,
            "dec_cell" => self.dec_cell = p(key, value)?,
            "postnet_layers" => self.postnet_layers = p(key, value)?,
            "postnet_channels" => self.postnet_channels = p(key, value)?,
            "n_speakers" => self.n_speakers = p(key, value)?,
            "f0_bins" => self.f0_bins = p(key, value)?,
            "use_f0" => self.use_f0 = p(key, value)?,
            "mel_mean" => self.mel_mean = p(key, value)?,
            "mel_std" => self.mel_std = p(key, value)?,
            "init_seed" => self.init_seed = p(key, value)?,
            _ => return Err(ModelError::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }
}

/// One-hot speaker identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeakerEmbedding {
    pub index: usize,
    pub n_speakers: usize,
}

impl SpeakerEmbedding {
    pub fn new(index: usize, n_speakers: usize) -> Result<Self> {
        if index >= n_speakers {
            return Err(ModelError::Speaker {
                index,
                n: n_speakers,
            });
        }
        Ok(Self { index, n_speakers })
    }

    pub fn vector(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n_speakers];
        v[self.index] = 1.0;
        v
    }
}

/// Downsampled bottleneck code: `rows x 2B`, forward half first.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentCode {
    pub codes: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
}

impl ContentCode {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.codes[k * self.dim..(k + 1) * self.dim]
    }
}

/// How the decoder's F0 conditioning is built during conversion.
#[derive(Debug, Clone, PartialEq)]
pub enum F0Mode {
    /// Source contour normalized with the source speaker's statistics.
    Natural,
    /// Every voiced frame set to one bin; unvoiced frames stay unvoiced.
    Flat(u16),
    /// Caller-supplied bins, one per source frame.
    External(QuantizedF0),
}

#[derive(Debug, Clone)]
struct Encoder {
    convs: Vec<(Conv1d, BatchNorm)>,
    lstms: Vec<BiLstm>,
}

#[derive(Debug, Clone)]
struct Decoder {
    proj: Linear,
    lstms: Vec<Lstm>,
    out: Linear,
    postnet: Vec<(Conv1d, BatchNorm)>,
}

/// Variables of one training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TrainOutputs {
    /// The input batch as raw log-mel rows.
    pub mel: Var,
    pub code: Var,
    pub mel_pre: Var,
    pub mel_post: Var,
    pub code_recon: Var,
}

/// A batch of equally long, 16-aligned sequences stacked along rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub layout: Layout,
    /// `(B*T) x 80` log-mel.
    pub mel: Vec<f64>,
    pub speakers: Vec<usize>,
    /// `B*T` conditioning bins, ignored when the model has no F0 input.
    pub f0_bins: Vec<u16>,
    /// Per-row loss weight (0 on padding).
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Optimizer steps applied so far; zero means untrained.
    pub trained_steps: u64,
    enc: Encoder,
    dec: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let c = config.conv_channels;
        let mut convs = Vec::new();
        let mut in_dim = config.mel_dim + config.n_speakers;
        for i in 0..config.n_enc_conv {
            convs.push((
                Conv1d::new(&mut store, &format!("enc.conv{i}"), in_dim, c, &mut rng),
                BatchNorm::new(&mut store, &format!("enc.bn{i}"), c),
            ));
            in_dim = c;
        }
        let lstms = (0..2)
            .map(|i| {
                let d = if i == 0 { c } else { config.code_dim() };
                BiLstm::new(&mut store, &format!("enc.lstm{i}"), d, config.enc_cell, &mut rng)
            })
            .collect();
        let h = config.dec_cell;
        let proj = Linear::new(&mut store, "dec.proj", config.decoder_input_dim(), h, &mut rng);
        let dec_lstms = (0..config.n_dec_lstm)
            .map(|i| Lstm::new(&mut store, &format!("dec.lstm{i}"), h, h, &mut rng))
            .collect();
        let out = Linear::new(&mut store, "dec.out", h, config.mel_dim, &mut rng);
        let p = config.postnet_channels;
        let n_post = config.postnet_layers;
        let postnet = (0..n_post)
            .map(|i| {
                let cin = if i == 0 { config.mel_dim } else { p };
                let cout = if i + 1 == n_post { config.mel_dim } else { p };
                (
                    Conv1d::new(&mut store, &format!("post.conv{i}"), cin, cout, &mut rng),
                    BatchNorm::new(&mut store, &format!("post.bn{i}"), cout),
                )
            })
            .collect();
        Ok(Self {
            config,
            store,
            trained_steps: 0,
            enc: Encoder { convs, lstms },
            dec: Decoder {
                proj,
                lstms: dec_lstms,
                out,
                postnet,
            },
        })
    }

    pub fn speaker(&self, index: usize) -> Result<SpeakerEmbedding> {
        SpeakerEmbedding::new(index, self.config.n_speakers)
    }

    fn check_speaker(&self, spk: &SpeakerEmbedding) -> Result<()> {
        if spk.n_speakers != self.config.n_speakers || spk.index >= self.config.n_speakers {
            return Err(ModelError::Speaker {
                index: spk.index,
                n: self.config.n_speakers,
            });
        }
        Ok(())
    }

    fn speaker_rows(&self, speakers: &[usize], len: usize) -> Tensor {
        let n = self.config.n_speakers;
        let mut m = vec![0.0; speakers.len() * len * n];
        for (b, &s) in speakers.iter().enumerate() {
            for t in 0..len {
                m[(b * len + t) * n + s] = 1.0;
            }
        }
        Tensor::from_rows(speakers.len() * len, n, m).expect("sized above")
    }

    fn normalize_in(&self, pass: &mut Pass, mel: Var) -> Result<Var> {
        let cfg = &self.config;
        let shift = pass
            .tape
            .input(Tensor::from_rows(1, cfg.mel_dim, vec![-cfg.mel_mean; cfg.mel_dim])?)?;
        let centered = pass.tape.add_row(mel, shift)?;
        Ok(pass.tape.scale(centered, 1.0 / cfg.mel_std)?)
    }

    fn denormalize_out(&self, pass: &mut Pass, y: Var) -> Result<Var> {
        let cfg = &self.config;
        let scaled = pass.tape.scale(y, cfg.mel_std)?;
        let shift = pass
            .tape
            .input(Tensor::from_rows(1, cfg.mel_dim, vec![cfg.mel_mean; cfg.mel_dim])?)?;
        Ok(pass.tape.add_row(scaled, shift)?)
    }

    /// Encoder on a stacked batch of raw log-mel rows.
    pub fn encode_var(&self, pass: &mut Pass, mel: Var, speakers: &[usize], layout: Layout) -> Result<Var> {
        if !layout.len.is_multiple_of(self.config.downsample) {
            return Err(ModelError::NotMultiple {
                frames: layout.len,
                factor: self.config.downsample,
            });
        }
        let x = self.normalize_in(pass, mel)?;
        let spk = pass.tape.input(self.speaker_rows(speakers, layout.len))?;
        let mut h = pass.tape.concat(&[x, spk])?;
        for (conv, bn) in &self.enc.convs {
            h = conv.forward(pass, h, layout)?;
            h = pass.tape.relu(h)?;
            h = bn.forward(pass, h)?;
        }
        for l in &self.enc.lstms {
            h = l.forward(pass, h, layout)?;
        }
        Ok(pass.tape.downsample(h, layout, self.config.downsample)?)
    }

    /// Decoder on a stacked batch of codes; returns raw-unit (pre, post).
    pub fn decode_var(
        &self,
        pass: &mut Pass,
        code: Var,
        speakers: &[usize],
        f0_bins: Option<&[u16]>,
        layout: Layout,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let up = pass.tape.upsample(code, layout, cfg.downsample)?;
        let spk = pass.tape.input(self.speaker_rows(speakers, layout.len))?;
        let mut parts = vec![up, spk];
        match (cfg.use_f0, f0_bins) {
            (true, Some(bins)) => {
                if bins.len() != layout.rows() {
                    return Err(ModelError::Length {
                        what: "F0 conditioning",
                        got: bins.len(),
                        expected: layout.rows(),
                    });
                }
                let q = QuantizedF0 {
                    bins: bins.to_vec(),
                };
                parts.push(pass.tape.input(Tensor::from_rows(bins.len(), F0_BINS, q.one_hot())?)?);
            }
            (true, None) => return Err(ModelError::F0Conditioning("with")),
            (false, Some(_)) => return Err(ModelError::F0Conditioning("without")),
            (false, None) => {}
        }
        let x = pass.tape.concat(&parts)?;
        let mut h = self.dec.proj.forward(pass, x)?;
        for l in &self.dec.lstms {
            h = l.forward(pass, h, layout, false)?;
        }
        let pre = self.dec.out.forward(pass, h)?;
        let mut r = pre;
        let n_post = self.dec.postnet.len();
        for (i, (conv, bn)) in self.dec.postnet.iter().enumerate() {
            r = conv.forward(pass, r, layout)?;
            r = bn.forward(pass, r)?;
            if i + 1 < n_post {
                r = pass.tape.relu(r)?;
            }
        }
        let post = pass.tape.add(pre, r)?;
        Ok((self.denormalize_out(pass, pre)?, self.denormalize_out(pass, post)?))
    }

    /// Self-reconstruction forward pass: the decoder receives the same
    /// speakers as the encoder, and the output is re-encoded for the code
    /// term of the loss.
    pub fn forward_train(&self, pass: &mut Pass, batch: &Batch) -> Result<TrainOutputs> {
        let layout = batch.layout;
        if batch.mel.len() != layout.rows() * MEL_BINS {
            return Err(ModelError::Length {
                what: "mel batch",
                got: batch.mel.len() / MEL_BINS,
                expected: layout.rows(),
            });
        }
        for &s in &batch.speakers {
            if s >= self.config.n_speakers {
                return Err(ModelError::Speaker {
                    index: s,
                    n: self.config.n_speakers,
                });
            }
        }
        let mel = pass
            .tape
            .input(Tensor::from_rows(layout.rows(), MEL_BINS, batch.mel.clone())?)?;
        let code = self.encode_var(pass, mel, &batch.speakers, layout)?;
        let f0 = self.config.use_f0.then_some(batch.f0_bins.as_slice());
        let (mel_pre, mel_post) = self.decode_var(pass, code, &batch.speakers, f0, layout)?;
        let code_recon = self.encode_var(pass, mel_post, &batch.speakers, layout)?;
        Ok(TrainOutputs {
            mel,
            code,
            mel_pre,
            mel_post,
            code_recon,
        })
    }

    pub fn encode(&self, mel: &MelSpectrogram, spk: &SpeakerEmbedding) -> Result<ContentCode> {
        self.check_speaker(spk)?;
        let t = mel.n_frames;
        if t == 0 || !t.is_multiple_of(self.config.downsample) {
            return Err(ModelError::NotMultiple {
                frames: t,
                factor: self.config.downsample,
            });
        }
        let mut pass = Pass::new(&self.store, false);
        let x = pass.tape.input(Tensor::from_rows(t, MEL_BINS, mel.frames.clone())?)?;
        let c = self.encode_var(&mut pass, x, &[spk.index], Layout::new(1, t))?;
        let v = pass.tape.value(c);
        Ok(ContentCode {
            codes: v.data().to_vec(),
            rows: v.rows(),
            dim: v.cols(),
        })
    }

    /// Per-frame copy of the code, `frames x 2B`.
    pub fn upsample(&self, code: &ContentCode, frames: usize) -> Result<Vec<f64>> {
        upsample_code(code, frames, self.config.downsample)
    }

    /// Returns (mel before postnet, mel after postnet).
    pub fn decode(
        &self,
        code: &ContentCode,
        spk: &SpeakerEmbedding,
        f0: Option<&QuantizedF0>,
    ) -> Result<(MelSpectrogram, MelSpectrogram)> {
        self.check_speaker(spk)?;
        if code.dim != self.config.code_dim() {
            return Err(ModelError::Length {
                what: "code width",
                got: code.dim,
                expected: self.config.code_dim(),
            });
        }
        let t = code.rows * self.config.downsample;
        let mut pass = Pass::new(&self.store, false);
        let c = pass
            .tape
            .input(Tensor::from_rows(code.rows, code.dim, code.codes.clone())?)?;
        let (pre, post) = self.decode_var(
            &mut pass,
            c,
            &[spk.index],
            f0.map(|q| q.bins.as_slice()),
            Layout::new(1, t),
        )?;
        let to_mel = |v: Var| -> Result<MelSpectrogram> {
            MelSpectrogram::new(pass.tape.value(v).data().to_vec(), t)
                .map_err(|e| ModelError::Format(e.to_string()))
        };
        Ok((to_mel(pre)?, to_mel(post)?))
    }

    /// Conversion: encode with the source speaker, decode with the target
    /// speaker and the chosen F0 conditioning. Inputs of any length are
    /// padded to a multiple of the downsampling factor by repeating the last
    /// frame; the output is trimmed back to the input length.
    pub fn convert(
        &self,
        src_mel: &MelSpectrogram,
        src_contour: &F0Contour,
        src_stats: Option<&SpeakerF0Stats>,
        src_spk: &SpeakerEmbedding,
        tgt_spk: &SpeakerEmbedding,
        mode: &F0Mode,
    ) -> Result<MelSpectrogram> {
        if self.trained_steps == 0 {
            return Err(ModelError::Untrained);
        }
        let t = src_mel.n_frames;
        if src_contour.len() != t {
            return Err(ModelError::Length {
                what: "source contour",
                got: src_contour.len(),
                expected: t,
            });
        }
        let f0 = if self.config.use_f0 {
            let q = match mode {
                F0Mode::Natural => {
                    let stats = src_stats.ok_or_else(|| {
                        ModelError::Config("natural F0 mode needs source statistics".into())
                    })?;
                    QuantizedF0::from_contour(src_contour, stats)
                }
                F0Mode::Flat(bin) => QuantizedF0::flat(src_contour, *bin),
                F0Mode::External(q) => {
                    if q.len() != t {
                        return Err(ModelError::Length {
                            what: "external F0",
                            got: q.len(),
                            expected: t,
                        });
                    }
                    q.clone()
                }
            };
            Some(q)
        } else {
            None
        };
        let padded = pad_frames(t, self.config.downsample);
        let mut frames = src_mel.frames.clone();
        for _ in t..padded {
            frames.extend_from_within((t - 1) * MEL_BINS..t * MEL_BINS);
        }
        let mel = MelSpectrogram::new(frames, padded).map_err(|e| ModelError::Format(e.to_string()))?;
        let f0 = f0.map(|mut q| {
            q.bins.resize(padded, UNVOICED_BIN);
            q
        });
        let code = self.encode(&mel, src_spk)?;
        let (_, post) = self.decode(&code, tgt_spk, f0.as_ref())?;
        MelSpectrogram::new(post.frames[..t * MEL_BINS].to_vec(), t)
            .map_err(|e| ModelError::Format(e.to_string()))
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let text = self.config.to_text();
        w.write_all(&MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&self.trained_steps.to_le_bytes())?;
        write_named_tensors(&mut w, &self.store.to_named())?;
        Ok(())
    }

    /// Loads a model file; with `expected` set, the stored config must match.
    pub fn load<R: Read>(mut r: R, expected: Option<&ModelConfig>) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)
            .map_err(|_| ModelError::Format("truncated header".into()))?;
        if head[..4] != MODEL_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        if len > 1 << 16 {
            return Err(ModelError::Format("implausible config length".into()));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)
            .map_err(|_| ModelError::Format("truncated config".into()))?;
        let text = String::from_utf8(text).map_err(|_| ModelError::Format("config not UTF-8".into()))?;
        let config = ModelConfig::from_text(&text)?;
        if let Some(exp) = expected {
            if *exp != config {
                return Err(ModelError::ConfigMismatch(describe_mismatch(exp, &config)));
            }
        }
        let mut steps = [0u8; 8];
        r.read_exact(&mut steps)
            .map_err(|_| ModelError::Format("truncated step count".into()))?;
        let mut model = Model::new(config)?;
        model.trained_steps = u64::from_le_bytes(steps);
        let named = read_named_tensors(&mut r)?;
        model.store.load_named(&named)?;
        Ok(model)
    }
}

fn describe_mismatch(a: &ModelConfig, b: &ModelConfig) -> String {
    let (ta, tb) = (a.to_text(), b.to_text());
    let diffs: Vec<String> = ta
        .lines()
        .zip(tb.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| format!("expected {x}, found {y}"))
        .collect();
    diffs.join("; ")
}

pub fn pad_frames(t: usize, factor: usize) -> usize {
    t.div_ceil(factor).max(1) * factor
}

/// Per-frame copy of each code row over its window.
pub fn upsample_code(code: &ContentCode, frames: usize, factor: usize) -> Result<Vec<f64>> {
    if frames != code.rows * factor {
        return Err(ModelError::Length {
            what: "upsample target",
            got: frames,
            expected: code.rows * factor,
        });
    }
    let mut out = Vec::with_capacity(frames * code.dim);
    for t in 0..frames {
        out.extend_from_slice(code.row(t / factor));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::F0Frame;

    fn tiny(use_f0: bool) -> ModelConfig {
        ModelConfig {
            conv_channels: 8,
            enc_cell: 4,
            n_dec_lstm: 1,
            dec_cell: 8,
            postnet_channels: 8,
            n_speakers: 3,
            use_f0,
            mel_mean: -4.0,
            mel_std: 2.0,
            ..ModelConfig::full_scale(3)
        }
    }

    fn mel(t: usize, seed: f64) -> MelSpectrogram {
        MelSpectrogram::new(
            (0..t * 80).map(|i| ((i as f64) * 0.37 + seed).sin() * 2.0 - 4.0).collect(),
            t,
        )
        .unwrap()
    }

    fn bins(t: usize) -> QuantizedF0 {
        QuantizedF0 {
            bins: (0..t).map(|i| if i % 5 == 0 { 256 } else { (i * 7 % 256) as u16 }).collect(),
        }
    }

    #[test]
    fn full_scale_matches_architecture() {
        let c = ModelConfig::full_scale(20);
        assert_eq!(
            (c.conv_channels, c.n_enc_conv, c.enc_cell, c.downsample),
            (512, 3, 16, 16)
        );
        assert_eq!((c.n_dec_lstm, c.dec_cell, c.postnet_layers), (3, 512, 5));
        assert_eq!(c.code_dim(), 32);
    }

    #[test]
    fn encode_shapes() {
        let m = Model::new(ModelConfig {
            enc_cell: 16,
            ..tiny(true)
        })
        .unwrap();
        let spk = m.speaker(0).unwrap();
        let code = m.encode(&mel(32, 0.0), &spk).unwrap();
        assert_eq!((code.rows, code.dim), (2, 32));
        let z = MelSpectrogram::new(vec![0.0; 16 * 80], 16).unwrap();
        let code = m.encode(&z, &spk).unwrap();
        assert_eq!((code.rows, code.dim), (1, 32));
        assert!(code.codes.iter().all(|v| v.is_finite()));
        assert!(matches!(
            m.encode(&mel(20, 0.0), &spk),
            Err(ModelError::NotMultiple { .. })
        ));
        assert!(m.encode(&mel(16, 0.0), &SpeakerEmbedding { index: 0, n_speakers: 5 }).is_err());
    }

    #[test]
    fn encode_depends_on_speaker() {
        let m = Model::new(tiny(true)).unwrap();
        let x = mel(32, 1.0);
        let a = m.encode(&x, &m.speaker(0).unwrap()).unwrap();
        let b = m.encode(&x, &m.speaker(1).unwrap()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn upsample_copies_rows() {
        let code = ContentCode {
            codes: vec![1.0, 2.0, 3.0, 4.0],
            rows: 2,
            dim: 2,
        };
        let up = upsample_code(&code, 32, 16).unwrap();
        for t in 0..16 {
            assert_eq!(&up[t * 2..t * 2 + 2], &[1.0, 2.0]);
        }
        for t in 16..32 {
            assert_eq!(&up[t * 2..t * 2 + 2], &[3.0, 4.0]);
        }
        assert!(upsample_code(&code, 31, 16).is_err());
        let one = ContentCode {
            codes: vec![5.0, 6.0],
            rows: 1,
            dim: 2,
        };
        let up = upsample_code(&one, 16, 16).unwrap();
        assert!(up.chunks(2).all(|r| r == [5.0, 6.0]));
    }

    #[test]
    fn decode_shapes_and_f0_sensitivity() {
        let m = Model::new(tiny(true)).unwrap();
        let spk = m.speaker(2).unwrap();
        let code = m.encode(&mel(32, 0.5), &spk).unwrap();
        let q = bins(32);
        let (pre, post) = m.decode(&code, &spk, Some(&q)).unwrap();
        assert_eq!((pre.n_frames, post.n_frames), (32, 32));
        let mut q2 = q.clone();
        q2.bins[10] = 3;
        let (_, post2) = m.decode(&code, &spk, Some(&q2)).unwrap();
        assert_ne!(post, post2);
        assert!(matches!(
            m.decode(&code, &spk, Some(&bins(16))),
            Err(ModelError::Length { .. })
        ));
        assert!(m.decode(&code, &spk, None).is_err());
    }

    #[test]
    fn baseline_decodes_without_f0() {
        let m = Model::new(tiny(false)).unwrap();
        let spk = m.speaker(0).unwrap();
        let code = m.encode(&mel(32, 0.5), &spk).unwrap();
        let (pre, post) = m.decode(&code, &spk, None).unwrap();
        assert_eq!((pre.n_frames, post.n_frames), (32, 32));
        assert!(m.decode(&code, &spk, Some(&bins(32))).is_err());
    }

    #[test]
    fn f0_and_baseline_differ_only_in_decoder_input() {
        let a = Model::new(tiny(true)).unwrap();
        let b = Model::new(tiny(false)).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for id in a.store.ids() {
            assert_eq!(a.store.name(id), b.store.name(id));
            if a.store.name(id) != "dec.proj.w" {
                assert_eq!(a.store.value(id).shape(), b.store.value(id).shape());
            }
        }
        assert_eq!(
            a.config.decoder_input_dim() - b.config.decoder_input_dim(),
            F0_BINS
        );
    }

    #[test]
    fn convert_contracts() {
        let mut m = Model::new(tiny(true)).unwrap();
        let src = mel(37, 0.2);
        let contour = F0Contour::new(
            (0..37)
                .map(|i| if i % 4 == 0 { F0Frame::UNVOICED } else { F0Frame::voiced(100.0 + i as f64) })
                .collect(),
        );
        let stats = SpeakerF0Stats::new(4.7, 0.1, 500).unwrap();
        let (s, t) = (m.speaker(0).unwrap(), m.speaker(1).unwrap());
        assert!(matches!(
            m.convert(&src, &contour, Some(&stats), &s, &t, &F0Mode::Natural),
            Err(ModelError::Untrained)
        ));
        m.trained_steps = 1;
        let out = m
            .convert(&src, &contour, Some(&stats), &s, &t, &F0Mode::Natural)
            .unwrap();
        assert_eq!(out.n_frames, 37);
        let out = m
            .convert(&src, &contour, None, &s, &t, &F0Mode::External(QuantizedF0::all_unvoiced(37)))
            .unwrap();
        assert!(out.frames.iter().all(|v| v.is_finite()));
        assert!(m
            .convert(&src, &contour, None, &s, &t, &F0Mode::External(QuantizedF0::all_unvoiced(36)))
            .is_err());
        assert!(m.convert(&src, &contour, None, &s, &t, &F0Mode::Natural).is_err());
        let flat = m.convert(&src, &contour, None, &s, &t, &F0Mode::Flat(128)).unwrap();
        assert_eq!(flat.n_frames, 37);
    }

    #[test]
    fn model_file_roundtrip_and_mismatch() {
        let mut m = Model::new(tiny(true)).unwrap();
        m.trained_steps = 7;
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = Model::load(&buf[..], Some(&m.config)).unwrap();
        assert_eq!(back.trained_steps, 7);
        assert_eq!(back.store.to_named(), m.store.to_named());
        let other = ModelConfig {
            n_speakers: 4,
            ..m.config.clone()
        };
        match Model::load(&buf[..], Some(&other)) {
            Err(ModelError::ConfigMismatch(msg)) => assert!(msg.contains("n_speakers")),
            other => panic!("expected mismatch, got {other:?}"),
        }
        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert!(matches!(Model::load(&bad[..], None), Err(ModelError::Format(_))));
    }

    #[test]
    fn config_text_roundtrip() {
        let c = tiny(false);
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        let mut c2 = c.clone();
        assert!(c2.set("nonsense", "1").is_err());
    }
}
