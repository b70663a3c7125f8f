//! Normalized quantized log-F0: per-speaker log-F0 statistics, the 257-way
//! per-frame conditioning code, its bin-center inverse and the Gaussian
//! normalized transformation between two speakers' pitch ranges.
//!
//! Bins 0..=255 cover the normalized voiced range, bin 256 marks unvoiced
//! frames. The normalized value `(log_f0 - mu) / (4 sigma)` spans roughly
//! [-1, 1] over +-4 sigma; it is mapped affinely to [0, 1] and clamped before
//! binning, so outliers land in the extreme bins.

use thiserror::Error;

use crate::dsp::{F0Contour, F0Frame};

pub const VOICED_BINS: usize = 256;
pub const UNVOICED_BIN: u16 = 256;
pub const F0_BINS: usize = 257;
/// Minimum number of voiced frames behind a usable statistic.
pub const MIN_STATS_FRAMES: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("only {found} voiced frames, need at least {MIN_STATS_FRAMES}")]
    TooFewVoiced { found: usize },
    #[error("log-F0 standard deviation is zero")]
    ZeroSpread,
    #[error("bin {0} has no pitch value (unvoiced or out of range)")]
    NoValue(u16),
    #[error("invalid stats: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerF0Stats {
    pub mu: f64,
    pub sigma: f64,
    pub n_frames: usize,
}

impl SpeakerF0Stats {
    pub fn new(mu: f64, sigma: f64, n_frames: usize) -> Result<Self, CodecError> {
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(CodecError::Invalid("non-finite moment".into()));
        }
        if sigma <= 0.0 {
            return Err(CodecError::ZeroSpread);
        }
        if n_frames < MIN_STATS_FRAMES {
            return Err(CodecError::TooFewVoiced { found: n_frames });
        }
        Ok(Self {
            mu,
            sigma,
            n_frames,
        })
    }
}

/// Mean and (population) standard deviation of natural-log F0 over the
/// voiced frames of all contours.
pub fn compute_stats(contours: &[F0Contour]) -> Result<SpeakerF0Stats, CodecError> {
    let logs: Vec<f64> = contours.iter().flat_map(|c| c.voiced_log_f0()).collect();
    if logs.len() < MIN_STATS_FRAMES {
        return Err(CodecError::TooFewVoiced { found: logs.len() });
    }
    let n = logs.len() as f64;
    let mu = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    // constant contours still leave rounding noise in `var`
    if var.sqrt() <= 1e-12 * mu.abs().max(1.0) {
        return Err(CodecError::ZeroSpread);
    }
    SpeakerF0Stats::new(mu, var.sqrt(), logs.len())
}

pub fn normalize(log_f0: f64, stats: &SpeakerF0Stats) -> f64 {
    (log_f0 - stats.mu) / stats.sigma / 4.0
}

/// `None` is an unvoiced frame.
pub fn quantize(p_norm: Option<f64>) -> u16 {
    match p_norm {
        None => UNVOICED_BIN,
        Some(p) => {
            let u = ((p + 1.0) / 2.0).clamp(0.0, 1.0);
            ((u * VOICED_BINS as f64).floor() as usize).min(VOICED_BINS - 1) as u16
        }
    }
}

/// Bin-center inverse of `quantize(normalize(..))`.
pub fn dequantize(bin: u16, stats: &SpeakerF0Stats) -> Result<f64, CodecError> {
    if bin as usize >= VOICED_BINS {
        return Err(CodecError::NoValue(bin));
    }
    let u = (bin as f64 + 0.5) / VOICED_BINS as f64;
    let p_norm = 2.0 * u - 1.0;
    Ok(stats.mu + 4.0 * stats.sigma * p_norm)
}

/// Gaussian normalized transformation of a source log-F0 into the target
/// speaker's range.
pub fn pseudo_f0(log_f0_src: f64, src: &SpeakerF0Stats, tgt: &SpeakerF0Stats) -> f64 {
    tgt.mu + (tgt.sigma / src.sigma) * (log_f0_src - src.mu)
}

/// Per-frame pseudo-F0 contour; unvoiced frames stay unvoiced.
pub fn pseudo_contour(c: &F0Contour, src: &SpeakerF0Stats, tgt: &SpeakerF0Stats) -> F0Contour {
    F0Contour::new(
        c.frames
            .iter()
            .map(|f| match f.log_f0() {
                Some(l) => F0Frame::voiced(pseudo_f0(l, src, tgt).exp()),
                None => F0Frame::UNVOICED,
            })
            .collect(),
    )
}

/// Per-frame conditioning bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedF0 {
    pub bins: Vec<u16>,
}

impl QuantizedF0 {
    pub fn from_contour(c: &F0Contour, stats: &SpeakerF0Stats) -> Self {
        Self {
            bins: c
                .frames
                .iter()
                .map(|f| quantize(f.log_f0().map(|l| normalize(l, stats))))
                .collect(),
        }
    }

    /// Every voiced frame forced to `bin`; unvoiced frames keep bin 256.
    pub fn flat(c: &F0Contour, bin: u16) -> Self {
        Self {
            bins: c
                .frames
                .iter()
                .map(|f| if f.voiced { bin } else { UNVOICED_BIN })
                .collect(),
        }
    }

    pub fn all_unvoiced(n: usize) -> Self {
        Self {
            bins: vec![UNVOICED_BIN; n],
        }
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn one_hot(&self) -> Vec<f64> {
        one_hot(self)
    }

    /// Contour implied by the bins under `stats` (bin centers).
    pub fn to_contour(&self, stats: &SpeakerF0Stats) -> F0Contour {
        F0Contour::new(
            self.bins
                .iter()
                .map(|&b| match dequantize(b, stats) {
                    Ok(l) => F0Frame::voiced(l.exp()),
                    Err(_) => F0Frame::UNVOICED,
                })
                .collect(),
        )
    }
}

/// T x 257 row-major one-hot matrix.
pub fn one_hot(q: &QuantizedF0) -> Vec<f64> {
    let mut m = vec![0.0; q.len() * F0_BINS];
    for (t, &b) in q.bins.iter().enumerate() {
        m[t * F0_BINS + (b as usize).min(F0_BINS - 1)] = 1.0;
    }
    m
}
