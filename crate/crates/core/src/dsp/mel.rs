use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::{hann_periodic, AudioConfig, DspError, MelSpectrogram, Result, Waveform};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, evaluated on the rfft bin grid.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Row-major n_mels x n_bins.
    pub weights: Vec<f64>,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &AudioConfig) -> Self {
        let n_bins = cfg.fft_size / 2 + 1;
        let n_mels = cfg.mel_bins;
        let (lo, hi) = (hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Self {
            n_mels,
            n_bins,
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn apply(&self, mag: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let row = &self.weights[m * self.n_bins..(m + 1) * self.n_bins];
            *o = row.iter().zip(mag).map(|(w, x)| w * x).sum();
        }
    }
}

pub(crate) struct Stft {
    pub fwd: Arc<dyn RealToComplex<f64>>,
    pub inv: Arc<dyn ComplexToReal<f64>>,
    pub window: Vec<f64>,
    pub fft_size: usize,
    pub hop: usize,
}

impl Stft {
    pub fn new(cfg: &AudioConfig) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        Self {
            fwd: planner.plan_fft_forward(cfg.fft_size),
            inv: planner.plan_fft_inverse(cfg.fft_size),
            window: hann_periodic(cfg.window),
            fft_size: cfg.fft_size,
            hop: cfg.hop,
        }
    }

    pub fn frame_spectrum(&self, samples: &[f64], t: usize) -> Vec<Complex<f64>> {
        let mut buf = vec![0.0; self.fft_size];
        let start = t * self.hop;
        for (i, w) in self.window.iter().enumerate() {
            buf[i] = samples[start + i] * w;
        }
        let mut spec = self.fwd.make_output_vec();
        self.fwd
            .process(&mut buf, &mut spec)
            .expect("fft buffer sizes are fixed by the plan");
        spec
    }

    pub fn analyze(&self, samples: &[f64], n_frames: usize) -> Vec<Vec<Complex<f64>>> {
        crate::par::map_range(n_frames, |t| self.frame_spectrum(samples, t))
    }

    /// Inverse FFT of one frame, windowed, returned at window length.
    pub fn synth_frame(&self, spec: &[Complex<f64>]) -> Vec<f64> {
        let mut s = spec.to_vec();
        // imaginary parts of DC and Nyquist must vanish for a real signal
        s[0].im = 0.0;
        if let Some(last) = s.last_mut() {
            last.im = 0.0;
        }
        let mut out = self.inv.make_output_vec();
        self.inv
            .process(&mut s, &mut out)
            .expect("fft buffer sizes are fixed by the plan");
        let scale = 1.0 / self.fft_size as f64;
        self.window
            .iter()
            .enumerate()
            .map(|(i, w)| out[i] * scale * w)
            .collect()
    }
}

/// Log mel amplitude spectrogram, T = 1 + (len - window) / hop frames.
pub fn mel_spectrogram(w: &Waveform, cfg: &AudioConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if w.len() < cfg.window {
        return Err(DspError::TooShort {
            len: w.len(),
            window: cfg.window,
        });
    }
    let n_frames = cfg.frame_count(w.len());
    let stft = Stft::new(cfg);
    let fb = MelFilterbank::new(cfg);
    let rows = crate::par::map_range(n_frames, |t| {
        let spec = stft.frame_spectrum(&w.samples, t);
        let mag: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
        let mut mel = vec![0.0; fb.n_mels];
        fb.apply(&mag, &mut mel);
        for v in &mut mel {
            *v = v.max(cfg.log_floor).ln();
        }
        mel
    });
    MelSpectrogram::new(rows.concat(), n_frames)
}
