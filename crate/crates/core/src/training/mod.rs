//! Self-reconstruction training: corpus handling, augmentation, the
//! reconstruction objective, the optimizer loop and resumable checkpoints.

mod augment;
mod corpus;

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsp::{DspError, MEL_BINS};
use crate::f0codec::{CodecError, QuantizedF0, SpeakerF0Stats};
use crate::model::{Batch, Model, ModelConfig, ModelError, TrainOutputs};
use crate::nn::{
    clip_grad_norm, read_named_tensors, write_named_tensors, AdamConfig, AdamState, Layout,
    NamedTensor, NnError, Pass, Tape, Tensor, Var,
};

pub use augment::{augment, stretch_contour, stretch_mel, AugmentParams, Augmented};
pub use corpus::{
    feature_paths, fnv1a, prepare_corpus, read_features, split_files, CorpusManifest,
    SpeakerEntry, Split, UttEntry, Utterance, FEATURE_DIR, MANIFEST_FILE, TEST_FRACTION,
};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"F0CK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const LOG_HEADER: &str = "iteration,loss_total,loss_mel_pre,loss_mel_post,loss_code";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("F0 statistics for speaker {speaker}: {source}")]
    Stats { speaker: String, source: CodecError },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("data: {0}")]
    Data(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at iteration {iteration}; last good checkpoint: {}",
        .last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    NonFinite {
        iteration: u64,
        last_good: Option<PathBuf>,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: u64,
    /// Weight of the code reconstruction term.
    pub lambda: f64,
    pub crop_min_s: f64,
    pub crop_max_s: f64,
    pub stretch_min: f64,
    pub stretch_max: f64,
    pub gain_min: f64,
    pub gain_max: f64,
    pub seed: u64,
    /// Global gradient norm bound.
    pub clip_norm: f64,
    pub checkpoint_every: u64,
    pub frames_per_second: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 2,
            iterations: 20_000,
            lambda: 1.0,
            crop_min_s: 1.0,
            crop_max_s: 3.0,
            stretch_min: 0.7,
            stretch_max: 1.35,
            gain_min: 0.1,
            gain_max: 1.0,
            seed: 0,
            clip_norm: 1.0,
            checkpoint_every: 1000,
            frames_per_second: 62.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(self.crop_min_s > 0.0 && self.crop_min_s <= self.crop_max_s) {
            return bad("need 0 < crop_min_s <= crop_max_s");
        }
        if !(self.stretch_min > 0.0 && self.stretch_min <= self.stretch_max) {
            return bad("need 0 < stretch_min <= stretch_max");
        }
        if !(self.gain_min > 0.0 && self.gain_min <= self.gain_max) {
            return bad("need 0 < gain_min <= gain_max");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.frames_per_second.is_nan() || self.frames_per_second <= 0.0 {
            return bad("frames_per_second must be positive");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| TrainError::Config(format!("bad value {v:?} for {k}")))
        }
        match key {
            "lr" => self.lr = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "iterations" => self.iterations = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "crop_min_s" => self.crop_min_s = p(key, value)?,
            "crop_max_s" => self.crop_max_s = p(key, value)?,
            "stretch_min" => self.stretch_min = p(key, value)?,
            "stretch_max" => self.stretch_max = p(key, value)?,
            "gain_min" => self.gain_min = p(key, value)?,
            "gain_max" => self.gain_max = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "clip_norm" => self.clip_norm = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "frames_per_second" => self.frames_per_second = p(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown train key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "lr={:?}\nbatch_size={}\niterations={}\nlambda={:?}\ncrop_min_s={:?}\ncrop_max_s={:?}\n\
             stretch_min={:?}\nstretch_max={:?}\ngain_min={:?}\ngain_max={:?}\nseed={}\n\
             clip_norm={:?}\ncheckpoint_every={}\nframes_per_second={:?}\n",
            self.lr,
            self.batch_size,
            self.iterations,
            self.lambda,
            self.crop_min_s,
            self.crop_max_s,
            self.stretch_min,
            self.stretch_max,
            self.gain_min,
            self.gain_max,
            self.seed,
            self.clip_norm,
            self.checkpoint_every,
            self.frames_per_second
        )
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("bad line {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    fn crop_range(&self) -> (usize, usize) {
        let lo = (self.crop_min_s * self.frames_per_second).round().max(1.0) as usize;
        let hi = (self.crop_max_s * self.frames_per_second).round() as usize;
        (lo, hi.max(lo))
    }
}

/// Training utterances with the per-speaker statistics used to build the
/// F0 conditioning.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub items: Vec<Utterance>,
    pub stats: Vec<SpeakerF0Stats>,
}

impl TrainingData {
    pub fn load(manifest: &CorpusManifest, work_dir: &Path) -> Result<Self> {
        let items = manifest.load_split(work_dir, Split::Train)?;
        Self::new(items, manifest.stats())
    }

    pub fn new(items: Vec<Utterance>, stats: Vec<SpeakerF0Stats>) -> Result<Self> {
        if items.is_empty() {
            return Err(TrainError::Data("no training utterances".into()));
        }
        if let Some(u) = items.iter().find(|u| u.speaker >= stats.len() || u.mel.n_frames == 0) {
            return Err(TrainError::Data(format!("utterance {} is empty or has no speaker stats", u.path)));
        }
        Ok(Self { items, stats })
    }

    /// Mean and standard deviation over every log-mel value.
    pub fn mel_moments(&self) -> (f64, f64) {
        let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
        for u in &self.items {
            for &v in &u.mel.frames {
                n += 1.0;
                s += v;
                s2 += v * v;
            }
        }
        let mean = s / n;
        (mean, (s2 / n - mean * mean).max(1e-12).sqrt())
    }
}

/// Loss components of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub total: f64,
    pub mel_pre: f64,
    pub mel_post: f64,
    pub code: f64,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?}",
            self.iteration, self.total, self.mel_pre, self.mel_post, self.code
        )
    }
}

/// Loss variables on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mel_pre: Var,
    pub mel_post: Var,
    pub code: Var,
}

/// Squared error of both decoder outputs against the input plus `lambda`
/// times the L1 distance between the content code and the re-encoded
/// output. Mel terms sum over bins and average over unmasked frames; the
/// code term sums over dimensions and averages over code frames.
#[allow(clippy::too_many_arguments)]
pub fn recon_loss(
    tape: &mut Tape,
    mel_true: Var,
    mel_pre: Var,
    mel_post: Var,
    code: Var,
    code_recon: Var,
    mask: &[f64],
    lambda: f64,
) -> Result<LossVars> {
    let frames: f64 = mask.iter().sum();
    if frames <= 0.0 {
        return Err(TrainError::Data("loss mask selects no frames".into()));
    }
    let pre = tape.mse(mel_pre, mel_true, Some(mask), frames)?;
    let post = tape.mse(mel_post, mel_true, Some(mask), frames)?;
    let code_rows = tape.value(code).rows() as f64;
    let c = tape.l1(code_recon, code, code_rows)?;
    let mel = tape.add(pre, post)?;
    let weighted = tape.scale(c, lambda)?;
    let total = tape.add(mel, weighted)?;
    Ok(LossVars {
        total,
        mel_pre: pre,
        mel_post: post,
        code: c,
    })
}

/// Model, optimizer and position in the iteration sequence.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub iteration: u64,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(
            &model.store,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            model,
            adam,
            iteration: 0,
            config,
        })
    }

    /// The random stream of one iteration depends only on the seed and the
    /// iteration number, so a resumed run draws the same batches.
    fn iteration_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.iteration);
        rng
    }

    /// Draws and augments the batch of the current iteration.
    pub fn sample_batch(&self, data: &TrainingData) -> Batch {
        let mut rng = self.iteration_rng();
        let (lo, hi) = self.config.crop_range();
        let crop = rng.gen_range(lo..=hi);
        let factor = self.model.config.downsample;
        let bs = self.config.batch_size;
        let mut parts = Vec::with_capacity(bs);
        for _ in 0..bs {
            let u = &data.items[rng.gen_range(0..data.items.len())];
            let p = AugmentParams::draw(&mut rng, &self.config, crop);
            parts.push((u.speaker, augment(&u.mel, &u.f0, &p, factor)));
        }
        let len = parts[0].1.mel.n_frames;
        let mut batch = Batch {
            layout: Layout::new(bs, len),
            mel: Vec::with_capacity(bs * len * MEL_BINS),
            speakers: Vec::with_capacity(bs),
            f0_bins: Vec::with_capacity(bs * len),
            mask: Vec::with_capacity(bs * len),
        };
        for (spk, a) in parts {
            debug_assert_eq!(a.mel.n_frames, len);
            batch.mel.extend_from_slice(&a.mel.frames);
            batch.f0_bins.extend(QuantizedF0::from_contour(&a.f0, &data.stats[spk]).bins);
            batch.mask.extend((0..len).map(|t| if t < a.valid { 1.0 } else { 0.0 }));
            batch.speakers.push(spk);
        }
        batch
    }

    /// Forward pass and loss of the current iteration without updating.
    pub fn evaluate(&self, data: &TrainingData) -> Result<LossRecord> {
        let batch = self.sample_batch(data);
        let mut pass = Pass::new(&self.model.store, true);
        let (vars, _) = self.forward(&mut pass, &batch)?;
        Ok(self.record(&pass.tape, &vars))
    }

    fn forward(&self, pass: &mut Pass, batch: &Batch) -> Result<(LossVars, TrainOutputs)> {
        let out = self.model.forward_train(pass, batch)?;
        let vars = recon_loss(
            &mut pass.tape,
            out.mel,
            out.mel_pre,
            out.mel_post,
            out.code,
            out.code_recon,
            &batch.mask,
            self.config.lambda,
        )?;
        Ok((vars, out))
    }

    fn record(&self, tape: &Tape, v: &LossVars) -> LossRecord {
        let get = |x: Var| tape.value(x).item();
        LossRecord {
            iteration: self.iteration,
            total: get(v.total),
            mel_pre: get(v.mel_pre),
            mel_post: get(v.mel_post),
            code: get(v.code),
        }
    }

    /// One optimizer iteration. A non-finite loss leaves the state untouched.
    pub fn step(&mut self, data: &TrainingData) -> Result<LossRecord> {
        let batch = self.sample_batch(data);
        let mut pass = Pass::new(&self.model.store, true);
        let nan = TrainError::NonFinite {
            iteration: self.iteration,
            last_good: None,
        };
        let (vars, _) = match self.forward(&mut pass, &batch) {
            Err(TrainError::Model(ModelError::Nn(NnError::NonFinite(_))))
            | Err(TrainError::Nn(NnError::NonFinite(_))) => return Err(nan),
            r => r?,
        };
        let rec = self.record(&pass.tape, &vars);
        if !rec.total.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: self.iteration,
                last_good: None,
            });
        }
        let Pass { mut tape, updates, .. } = pass;
        let store = &mut self.model.store;
        tape.backward(vars.total, store)?;
        for u in &updates {
            u.apply(store);
        }
        clip_grad_norm(store, self.config.clip_norm);
        self.adam.step(store)?;
        self.iteration += 1;
        self.model.trained_steps += 1;
        Ok(rec)
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let wr = |w: &mut W, b: &[u8]| w.write_all(b).map_err(|e| TrainError::Checkpoint(e.to_string()));
        let text = self.config.to_text();
        wr(&mut w, &CHECKPOINT_MAGIC)?;
        wr(&mut w, &CHECKPOINT_VERSION.to_le_bytes())?;
        wr(&mut w, &self.iteration.to_le_bytes())?;
        wr(&mut w, &(text.len() as u32).to_le_bytes())?;
        wr(&mut w, text.as_bytes())?;
        self.model.save(&mut w)?;
        wr(&mut w, &self.adam.step.to_le_bytes())?;
        let mut moments = Vec::with_capacity(2 * self.adam.params.len());
        for (k, &id) in self.adam.params.iter().enumerate() {
            let shape = self.model.store.value(id).shape().to_vec();
            let name = self.model.store.name(id);
            for (tag, buf) in [("m", &self.adam.m[k]), ("v", &self.adam.v[k])] {
                moments.push(NamedTensor {
                    name: format!("{tag}.{name}"),
                    trainable: false,
                    tensor: Tensor::new(shape.clone(), buf.clone())?,
                });
            }
        }
        write_named_tensors(&mut w, &moments).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        Ok(())
    }

    /// Restores a checkpoint; `expected` guards against architecture drift.
    pub fn load<R: Read>(mut r: R, expected: Option<&ModelConfig>) -> Result<Self> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        let mut head = [0u8; 20];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if head[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic bytes (not a training checkpoint)"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let iteration = u64::from_le_bytes(head[8..16].try_into().unwrap());
        let len = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
        if len > 1 << 16 {
            return Err(bad("implausible config length"));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(|_| bad("truncated config"))?;
        let config = TrainConfig::from_text(&String::from_utf8(text).map_err(|_| bad("config not UTF-8"))?)?;
        let model = Model::load(&mut r, expected)?;
        let mut step = [0u8; 8];
        r.read_exact(&mut step).map_err(|_| bad("truncated optimizer state"))?;
        let moments = read_named_tensors(&mut r)?;
        if moments.len() % 2 != 0 {
            return Err(bad("unpaired optimizer moments"));
        }
        let mut adam = AdamState {
            config: AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            step: u64::from_le_bytes(step),
            params: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        };
        for pair in moments.chunks_exact(2) {
            let name = pair[0]
                .name
                .strip_prefix("m.")
                .filter(|n| pair[1].name.strip_prefix("v.") == Some(*n))
                .ok_or_else(|| bad("malformed optimizer moment names"))?;
            let id = model
                .store
                .find(name)
                .ok_or_else(|| TrainError::Checkpoint(format!("moment for unknown parameter {name}")))?;
            if model.store.value(id).shape() != pair[0].tensor.shape() {
                return Err(TrainError::Checkpoint(format!("moment shape mismatch for {name}")));
            }
            adam.params.push(id);
            adam.m.push(pair[0].tensor.data().to_vec());
            adam.v.push(pair[1].tensor.data().to_vec());
        }
        Ok(Self {
            model,
            adam,
            iteration,
            config,
        })
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = File::create(&tmp).map_err(|e| TrainError::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            self.save(&mut w)?;
            w.flush().map_err(|e| TrainError::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
    }

    pub fn load_file(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let f = File::open(path).map_err(|e| TrainError::io(path, e))?;
        Self::load(BufReader::new(f), expected)
    }
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Steps until `trainer.iteration` reaches `until`, appending one CSV row
/// per iteration and checkpointing every `checkpoint_every` iterations and
/// at the end.
pub fn train(
    trainer: &mut Trainer,
    data: &TrainingData,
    until: u64,
    out: &RunOutputs,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    let mut log = match &out.log {
        Some(p) => {
            let fresh = fs::metadata(p).map(|m| m.len() == 0).unwrap_or(true);
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| TrainError::io(p, e))?;
            let mut w = BufWriter::new(f);
            if fresh {
                writeln!(w, "{LOG_HEADER}").map_err(|e| TrainError::io(p, e))?;
            }
            Some((p.clone(), w))
        }
        None => None,
    };
    let mut last_good = out.checkpoint.clone().filter(|p| p.exists());
    let mut records = Vec::new();
    while trainer.iteration < until {
        let rec = match trainer.step(data) {
            Err(TrainError::NonFinite { iteration, .. }) => {
                if let Some((p, w)) = log.as_mut() {
                    w.flush().map_err(|e| TrainError::io(p, e))?;
                }
                return Err(TrainError::NonFinite { iteration, last_good });
            }
            r => r?,
        };
        if let Some((p, w)) = log.as_mut() {
            writeln!(w, "{}", rec.csv_row()).map_err(|e| TrainError::io(p, e))?;
        }
        on_step(&rec);
        records.push(rec);
        let every = trainer.config.checkpoint_every;
        let due = (every > 0 && trainer.iteration.is_multiple_of(every)) || trainer.iteration == until;
        if let (true, Some(p)) = (due, &out.checkpoint) {
            if let Some((lp, w)) = log.as_mut() {
                w.flush().map_err(|e| TrainError::io(lp, e))?;
            }
            trainer.save_file(p)?;
            last_good = Some(p.clone());
        }
    }
    if let Some((p, w)) = log.as_mut() {
        w.flush().map_err(|e| TrainError::io(p, e))?;
    }
    Ok(records)
}

/// Means over consecutive non-overlapping windows.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
