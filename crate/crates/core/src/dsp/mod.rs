//! Audio ingestion and signal analysis/synthesis.
//!
//! Frames are laid out without implicit padding: frame `t` covers samples
//! `[t * hop, t * hop + window)`. The mel front end, the pitch tracker and
//! Griffin-Lim all share this layout, so an utterance always yields the same
//! number of mel frames and F0 frames.

mod griffin_lim;
mod matrix_io;
mod mel;
mod pitch;
mod resample;
mod wav;

pub use griffin_lim::griffin_lim;
pub use matrix_io::{
    read_matrix, read_matrix_file, write_contour_csv, write_matrix, write_matrix_csv,
    write_matrix_file, Matrix, MATRIX_MAGIC, MATRIX_VERSION,
};
pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, MelFilterbank};
pub use pitch::extract_f0;
pub use resample::resample;
pub use wav::{load_wav, write_wav};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error on {path}: {message}")]
    Wav { path: String, message: String },
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("expected mono audio, found {0} channels")]
    MultiChannel(u16),
    #[error("waveform has {len} samples, shorter than one analysis window of {window}")]
    TooShort { len: usize, window: usize },
    #[error("invalid audio config: {0}")]
    Config(String),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("matrix format error: {0}")]
    Format(String),
    #[error("mel matrix has {got} columns, expected {expected}")]
    MelWidth { got: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono audio, samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::Config("sample_rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(DspError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub window: usize,
    pub mel_bins: usize,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub voicing_threshold: f64,
    /// Floor applied to mel amplitudes before the log.
    pub log_floor: f64,
}

pub const MEL_BINS: usize = 80;

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            fft_size: 1024,
            hop: 256,
            window: 1024,
            mel_bins: MEL_BINS,
            mel_fmin: 90.0,
            mel_fmax: 7600.0,
            f0_min: 50.0,
            f0_max: 600.0,
            voicing_threshold: 0.45,
            log_floor: 1e-5,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DspError::Config(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.hop == 0 || self.hop > self.window || self.window > self.fft_size {
            return bad("need 0 < hop <= window <= fft_size");
        }
        if self.mel_bins != MEL_BINS {
            return bad("mel_bins must be 80 to match the model input");
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.mel_fmin >= 0.0 && self.mel_fmin < self.mel_fmax && self.mel_fmax <= nyquist) {
            return bad("need 0 <= mel_fmin < mel_fmax <= sample_rate/2");
        }
        if !(self.f0_min > 0.0 && self.f0_min < self.f0_max && self.f0_max < nyquist) {
            return bad("need 0 < f0_min < f0_max < sample_rate/2");
        }
        if !(self.voicing_threshold > 0.0 && self.voicing_threshold < 1.0) {
            return bad("voicing_threshold must lie in (0, 1)");
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    /// Number of analysis frames for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            1 + (len - self.window) / self.hop
        }
    }

    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Signal length produced by overlap-add of `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window
        }
    }
}

/// T x 80 log-amplitude frames, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<f64>,
    pub n_frames: usize,
}

impl MelSpectrogram {
    pub fn new(frames: Vec<f64>, n_frames: usize) -> Result<Self> {
        if frames.len() != n_frames * MEL_BINS {
            return Err(DspError::MelWidth {
                got: frames.len().checked_div(n_frames).unwrap_or(0),
                expected: MEL_BINS,
            });
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(DspError::NonFinite(i));
        }
        Ok(Self { frames, n_frames })
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.cols != MEL_BINS {
            return Err(DspError::MelWidth {
                got: m.cols,
                expected: MEL_BINS,
            });
        }
        Self::new(m.data.clone(), m.rows)
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.n_frames,
            cols: MEL_BINS,
            data: self.frames.clone(),
        }
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * MEL_BINS..(t + 1) * MEL_BINS]
    }

    pub fn len(&self) -> usize {
        self.n_frames
    }

    pub fn is_empty(&self) -> bool {
        self.n_frames == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Frame {
    pub f0_hz: f64,
    pub voiced: bool,
}

impl F0Frame {
    pub const UNVOICED: F0Frame = F0Frame {
        f0_hz: 0.0,
        voiced: false,
    };

    pub fn voiced(f0_hz: f64) -> Self {
        Self {
            f0_hz,
            voiced: true,
        }
    }

    pub fn log_f0(&self) -> Option<f64> {
        self.voiced.then(|| self.f0_hz.ln())
    }
}

/// Per-frame pitch track aligned with the mel frames of the same utterance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct F0Contour {
    pub frames: Vec<F0Frame>,
}

impl F0Contour {
    pub fn new(frames: Vec<F0Frame>) -> Self {
        Self { frames }
    }

    pub fn unvoiced(n: usize) -> Self {
        Self {
            frames: vec![F0Frame::UNVOICED; n],
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.frames.iter().filter(|f| f.voiced).count()
    }

    pub fn voiced_log_f0(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().filter_map(F0Frame::log_f0)
    }

    /// Two-column matrix (f0_hz, voiced flag) for binary export.
    pub fn to_matrix(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.frames.len() * 2);
        for f in &self.frames {
            data.push(if f.voiced { f.f0_hz } else { 0.0 });
            data.push(if f.voiced { 1.0 } else { 0.0 });
        }
        Matrix {
            rows: self.frames.len(),
            cols: 2,
            data,
        }
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.cols != 2 {
            return Err(DspError::Format(format!(
                "F0 contour matrix needs 2 columns, found {}",
                m.cols
            )));
        }
        Ok(Self {
            frames: m
                .data
                .chunks_exact(2)
                .map(|r| {
                    if r[1] > 0.5 {
                        F0Frame::voiced(r[0])
                    } else {
                        F0Frame::UNVOICED
                    }
                })
                .collect(),
        })
    }
}

pub(crate) fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}
