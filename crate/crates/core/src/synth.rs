//! Synthetic multi-speaker corpus for desk-scale experiments.
//!
//! Each utterance is a chain of phone segments. Vowels are a harmonic
//! source shaped by three formant resonances; fricatives are filtered
//! noise. Speakers differ in mean pitch, vocal-tract scale and spectral
//! tilt. Per-segment pitch targets are drawn independently of the phone
//! sequence, so pitch carries no information about content.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{write_wav, DspError, Waveform};

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpeaker {
    pub id: String,
    pub f0_hz: f64,
    /// Log-domain standard deviation of segment pitch targets.
    pub f0_spread: f64,
    pub formant_scale: f64,
    /// Harmonic amplitude roll-off exponent.
    pub tilt: f64,
}

/// Two low-pitched and two high-pitched voices.
pub fn default_speakers() -> Vec<ToySpeaker> {
    let s = |id: &str, f0_hz, formant_scale, tilt| ToySpeaker {
        id: id.into(),
        f0_hz,
        f0_spread: 0.12,
        formant_scale,
        tilt,
    };
    vec![
        s("low1", 100.0, 1.0, 0.9),
        s("low2", 120.0, 1.04, 1.1),
        s("high1", 210.0, 1.14, 0.8),
        s("high2", 245.0, 1.2, 1.0),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusConfig {
    pub speakers: Vec<ToySpeaker>,
    pub utterances_per_speaker: usize,
    pub min_secs: f64,
    pub max_secs: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            speakers: default_speakers(),
            utterances_per_speaker: 40,
            min_secs: 2.0,
            max_secs: 3.5,
            sample_rate: 16_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Phone {
    Vowel([f64; 3]),
    /// Centre frequency and bandwidth of the noise band.
    Fricative(f64, f64),
    Pause,
}

const PHONES: [Phone; 9] = [
    Phone::Vowel([730.0, 1090.0, 2440.0]),
    Phone::Vowel([270.0, 2290.0, 3010.0]),
    Phone::Vowel([300.0, 870.0, 2240.0]),
    Phone::Vowel([530.0, 1840.0, 2480.0]),
    Phone::Vowel([570.0, 840.0, 2410.0]),
    Phone::Vowel([660.0, 1720.0, 2410.0]),
    Phone::Fricative(5500.0, 2000.0),
    Phone::Fricative(3000.0, 1500.0),
    Phone::Pause,
];

const FORMANT_BW: [f64; 3] = [120.0, 150.0, 200.0];

struct Segment {
    phone: Phone,
    len: usize,
    log_f0: f64,
}

/// Renders one utterance.
pub fn synth_utterance(spk: &ToySpeaker, secs: f64, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let total = (secs * sr) as usize;
    let mut segs = Vec::new();
    let mut used = 0;
    let mu = spk.f0_hz.ln();
    while used < total {
        let phone = PHONES[match rng.gen_range(0..10) {
            k @ 0..=5 => k,
            6 | 7 => 6 + rng.gen_range(0..2),
            _ => 8,
        }];
        let dur = match phone {
            Phone::Vowel(_) => rng.gen_range(0.12..0.3),
            Phone::Fricative(..) => rng.gen_range(0.06..0.14),
            Phone::Pause => rng.gen_range(0.04..0.1),
        };
        let len = ((dur * sr) as usize).min(total - used).max(1);
        let z: f64 = rng.gen_range(-1.7..1.7);
        segs.push(Segment {
            phone,
            len,
            log_f0: mu + z * spk.f0_spread,
        });
        used += len;
    }

    let mut out = vec![0.0; total];
    let mut phase = 0.0;
    let mut log_f0 = segs[0].log_f0;
    let glide = 1.0 - (-1.0 / (0.05 * sr)).exp();
    let mut formants = segs.iter().find_map(|s| match s.phone {
        Phone::Vowel(f) => Some(f),
        _ => None,
    }).unwrap_or([500.0, 1500.0, 2500.0]);
    let fglide = 1.0 - (-1.0 / (0.02 * sr)).exp();
    let mut pos = 0;
    const BLOCK: usize = 32;
    let mut amps = Vec::new();
    for seg in &segs {
        let ramp = (0.01 * sr) as usize;
        match seg.phone {
            Phone::Vowel(target) => {
                let mut n = 0;
                while n < seg.len {
                    let block = BLOCK.min(seg.len - n);
                    let f0 = log_f0.exp();
                    let n_harm = ((7600.0 / f0) as usize).max(1);
                    amps.clear();
                    amps.extend((1..=n_harm).map(|h| {
                        let f = h as f64 * f0;
                        let env: f64 = formants
                            .iter()
                            .zip(FORMANT_BW)
                            .map(|(&fc, bw)| {
                                let d = (f - fc * spk.formant_scale) / bw;
                                1.0 / (1.0 + d * d)
                            })
                            .sum();
                        (env + 0.1) / (h as f64).powf(spk.tilt)
                    }));
                    for i in 0..block {
                        let k = n + i;
                        let edge = ramp.min(k + 1).min(seg.len - k) as f64 / ramp as f64;
                        let s: f64 = amps
                            .iter()
                            .enumerate()
                            .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
                            .sum();
                        out[pos + k] = s * edge.min(1.0);
                        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
                    }
                    for _ in 0..block {
                        log_f0 += glide * (seg.log_f0 - log_f0);
                        for (f, t) in formants.iter_mut().zip(target) {
                            *f += fglide * (t - *f);
                        }
                    }
                    n += block;
                }
            }
            Phone::Fricative(fc, bw) => {
                let (b0, a1, a2) = resonator(fc, bw, sr);
                let (mut y1, mut y2) = (0.0, 0.0);
                for k in 0..seg.len {
                    let x: f64 = rng.gen_range(-1.0..1.0);
                    let y = b0 * x - a1 * y1 - a2 * y2;
                    y2 = y1;
                    y1 = y;
                    let edge = ramp.min(k + 1).min(seg.len - k) as f64 / ramp as f64;
                    out[pos + k] = 0.6 * y * edge.min(1.0);
                }
                for _ in 0..seg.len {
                    log_f0 += glide * (seg.log_f0 - log_f0);
                }
            }
            Phone::Pause => {}
        }
        pos += seg.len;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        let g = 0.1 / rms;
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())) * g;
        let g = if peak > 0.95 { g * 0.95 / peak } else { g };
        out.iter_mut().for_each(|v| *v *= g);
    }
    out
}

/// Two-pole resonator coefficients with unit peak gain.
fn resonator(fc: f64, bw: f64, sr: f64) -> (f64, f64, f64) {
    let r = (-PI * bw / sr).exp();
    let theta = 2.0 * PI * fc / sr;
    let a1 = -2.0 * r * theta.cos();
    let a2 = r * r;
    (1.0 - r, a1, a2)
}

/// Writes `<root>/<speaker>/utt_NNN.wav` for every speaker.
pub fn generate_toy_corpus(root: &Path, cfg: &ToyCorpusConfig) -> Result<Vec<PathBuf>, DspError> {
    let jobs: Vec<(usize, usize)> = (0..cfg.speakers.len())
        .flat_map(|s| (0..cfg.utterances_per_speaker).map(move |u| (s, u)))
        .collect();
    for spk in &cfg.speakers {
        let dir = root.join(&spk.id);
        fs::create_dir_all(&dir).map_err(|e| DspError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    crate::par::map_slice(&jobs, |&(s, u)| {
        let spk = &cfg.speakers[s];
        // one stream per utterance keeps the output independent of scheduling
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(((s as u64) << 32) | u as u64);
        let secs = rng.gen_range(cfg.min_secs..=cfg.max_secs);
        let samples = synth_utterance(spk, secs, cfg.sample_rate, &mut rng);
        let path = root.join(&spk.id).join(format!("utt_{u:03}.wav"));
        write_wav(&path, &Waveform::new(samples, cfg.sample_rate)?)?;
        Ok(path)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{extract_f0, AudioConfig};

    #[test]
    fn pitch_follows_speaker_register() {
        let cfg = AudioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut means = Vec::new();
        for spk in default_speakers() {
            let w = Waveform::new(synth_utterance(&spk, 2.0, 16_000, &mut rng), 16_000).unwrap();
            let c = extract_f0(&w, &cfg).unwrap();
            assert!(c.voiced_count() > c.len() / 3, "{}: {} voiced of {}", spk.id, c.voiced_count(), c.len());
            let m = c.voiced_log_f0().sum::<f64>() / c.voiced_count() as f64;
            assert!((m - spk.f0_hz.ln()).abs() < 0.15, "{}: mean {}", spk.id, m.exp());
            means.push(m);
        }
        assert!(means[1] < means[2]);
    }

    #[test]
    fn deterministic_and_bounded() {
        let spk = &default_speakers()[0];
        let a = synth_utterance(spk, 1.0, 16_000, &mut ChaCha8Rng::seed_from_u64(9));
        let b = synth_utterance(spk, 1.0, 16_000, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), 16_000);
        assert!(a.iter().all(|v| v.abs() <= 0.95 + 1e-12));
    }

    #[test]
    fn writes_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig {
            utterances_per_speaker: 2,
            min_secs: 0.5,
            max_secs: 0.6,
            ..ToyCorpusConfig::default()
        };
        let files = generate_toy_corpus(dir.path(), &cfg).unwrap();
        assert_eq!(files.len(), 8);
        assert!(dir.path().join("high2/utt_001.wav").exists());
    }
}
