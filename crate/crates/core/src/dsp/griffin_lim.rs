use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use realfft::num_complex::Complex;

use super::mel::{MelFilterbank, Stft};
use super::{AudioConfig, MelSpectrogram, Result, Waveform};

const PHASE_SEED: u64 = 0x006f_1a2c;

struct Inversion {
    cfg: AudioConfig,
    /// n_bins x n_mels, row-major.
    pinv: Vec<f64>,
    n_mels: usize,
}

fn with_inversion<R>(cfg: &AudioConfig, f: impl FnOnce(&Inversion) -> R) -> R {
    // only the default geometry is cached; other configs rebuild per call
    static DEFAULT: OnceLock<Inversion> = OnceLock::new();
    if *cfg == AudioConfig::default() {
        f(DEFAULT.get_or_init(|| build_inversion(cfg)))
    } else {
        f(&build_inversion(cfg))
    }
}

fn build_inversion(cfg: &AudioConfig) -> Inversion {
    let fb = MelFilterbank::new(cfg);
    let m = DMatrix::from_row_slice(fb.n_mels, fb.n_bins, &fb.weights);
    let p = m
        .pseudo_inverse(1e-10)
        .expect("pseudo-inverse of a finite filterbank");
    let mut pinv = vec![0.0; fb.n_bins * fb.n_mels];
    for k in 0..fb.n_bins {
        for j in 0..fb.n_mels {
            pinv[k * fb.n_mels + j] = p[(k, j)];
        }
    }
    Inversion {
        cfg: cfg.clone(),
        pinv,
        n_mels: fb.n_mels,
    }
}

/// Linear magnitude frames recovered from log-mel through the non-negative
/// pseudo-inverse of the filterbank.
fn linear_magnitudes(m: &MelSpectrogram, inv: &Inversion) -> Vec<Vec<f64>> {
    let n_bins = inv.cfg.fft_size / 2 + 1;
    let floor = inv.cfg.log_floor;
    crate::par::map_range(m.n_frames, |t| {
        let amp: Vec<f64> = m
            .frame(t)
            .iter()
            .map(|&v| (v.exp() - floor).max(0.0))
            .collect();
        (0..n_bins)
            .map(|k| {
                let row = &inv.pinv[k * inv.n_mels..(k + 1) * inv.n_mels];
                row.iter().zip(&amp).map(|(p, a)| p * a).sum::<f64>().max(0.0)
            })
            .collect()
    })
}

fn overlap_add(stft: &Stft, spectra: &[Vec<Complex<f64>>], cfg: &AudioConfig) -> Vec<f64> {
    let len = cfg.signal_len(spectra.len());
    let frames = crate::par::map_slice(spectra, |s| stft.synth_frame(s));
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    for (t, frame) in frames.iter().enumerate() {
        let start = t * cfg.hop;
        for (i, (v, w)) in frame.iter().zip(&stft.window).enumerate() {
            out[start + i] += v;
            norm[start + i] += w * w;
        }
    }
    for (o, n) in out.iter_mut().zip(&norm) {
        *o = if *n > 1e-8 { *o / n } else { 0.0 };
    }
    out
}

/// Griffin-Lim phase reconstruction from a log-mel spectrogram.
pub fn griffin_lim(m: &MelSpectrogram, cfg: &AudioConfig, iters: usize) -> Result<Waveform> {
    cfg.validate()?;
    let iters = iters.max(1);
    let stft = Stft::new(cfg);
    let mags = with_inversion(cfg, |inv| linear_magnitudes(m, inv));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(PHASE_SEED);
    let mut spectra: Vec<Vec<Complex<f64>>> = mags
        .iter()
        .map(|row| {
            row.iter()
                .map(|&a| Complex::from_polar(a, rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let mut signal = overlap_add(&stft, &spectra, cfg);
    for _ in 1..iters {
        let est = stft.analyze(&signal, mags.len());
        for ((spec, e), mag) in spectra.iter_mut().zip(&est).zip(&mags) {
            for ((s, c), &a) in spec.iter_mut().zip(e).zip(mag) {
                let n = c.norm();
                *s = if n > 1e-12 {
                    c * (a / n)
                } else {
                    Complex::new(a, 0.0)
                };
            }
        }
        signal = overlap_add(&stft, &spectra, cfg);
    }
    Waveform::new(signal, cfg.sample_rate)
}
