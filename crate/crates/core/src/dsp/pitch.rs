use super::{AudioConfig, DspError, F0Contour, F0Frame, Result, Waveform};

/// Frames quieter than this RMS are unvoiced without further analysis.
const SILENCE_RMS: f64 = 1e-5;
/// Octave guard: the shortest-lag peak within this fraction of the best wins,
/// provided the best lag is close to a whole multiple of it.
const OCTAVE_RATIO: f64 = 0.9;
const MULTIPLE_TOL: f64 = 0.1;
/// Voiced runs shorter than this many frames are treated as unvoiced.
const MIN_VOICED_RUN: usize = 3;
/// Median filter length applied within voiced runs.
const MEDIAN_TAPS: usize = 5;

/// Normalized autocorrelation pitch tracker with parabolic peak refinement.
/// Frames share the mel layout, so the contour has one entry per mel frame.
pub fn extract_f0(w: &Waveform, cfg: &AudioConfig) -> Result<F0Contour> {
    cfg.validate()?;
    if w.len() < cfg.window {
        return Err(DspError::TooShort {
            len: w.len(),
            window: cfg.window,
        });
    }
    let n_frames = cfg.frame_count(w.len());
    let sr = w.sample_rate as f64;
    let min_lag = ((sr / cfg.f0_max).floor() as usize).max(2);
    let max_lag = ((sr / cfg.f0_min).ceil() as usize).min(cfg.window / 2);
    let frames = crate::par::map_range(n_frames, |t| {
        let seg = &w.samples[t * cfg.hop..t * cfg.hop + cfg.window];
        track_frame(seg, sr, min_lag, max_lag, cfg)
    });
    Ok(F0Contour::new(clean_runs(frames)))
}

/// Drops short voiced runs and median-filters the rest, run by run, so
/// isolated octave jumps and edge glitches do not survive.
pub(crate) fn clean_runs(mut frames: Vec<F0Frame>) -> Vec<F0Frame> {
    let n = frames.len();
    let mut t = 0;
    while t < n {
        if !frames[t].voiced {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && frames[t].voiced {
            t += 1;
        }
        let run = start..t;
        if run.len() < MIN_VOICED_RUN {
            frames[run].fill(F0Frame::UNVOICED);
            continue;
        }
        let raw: Vec<f64> = frames[run.clone()].iter().map(|f| f.f0_hz).collect();
        let half = MEDIAN_TAPS / 2;
        for (i, f) in frames[run].iter_mut().enumerate() {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(raw.len());
            let mut w = raw[lo..hi].to_vec();
            w.sort_by(f64::total_cmp);
            f.f0_hz = w[w.len() / 2];
        }
    }
    frames
}

fn track_frame(seg: &[f64], sr: f64, min_lag: usize, max_lag: usize, cfg: &AudioConfig) -> F0Frame {
    let n = seg.len();
    let mean = seg.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = seg.iter().map(|s| s - mean).collect();
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if (energy / n as f64).sqrt() < SILENCE_RMS {
        return F0Frame::UNVOICED;
    }
    // prefix sums of squares for the per-lag normalization
    let mut cum = vec![0.0; n + 1];
    for i in 0..n {
        cum[i + 1] = cum[i] + x[i] * x[i];
    }
    let lo = min_lag - 1;
    let hi = max_lag + 1;
    let mut r = vec![0.0; hi + 1];
    for (tau, rt) in r.iter_mut().enumerate().take(hi + 1).skip(lo) {
        let m = n - tau;
        let num: f64 = x[..m].iter().zip(&x[tau..]).map(|(a, b)| a * b).sum();
        let den = (cum[m] * (cum[n] - cum[tau])).sqrt();
        *rt = if den > 0.0 { num / den } else { 0.0 };
    }
    let peaks: Vec<usize> = (min_lag..=max_lag)
        .filter(|&k| r[k] >= r[k - 1] && r[k] > r[k + 1])
        .collect();
    let Some(&best_lag) = peaks.iter().max_by(|&&a, &&b| r[a].total_cmp(&r[b])) else {
        return F0Frame::UNVOICED;
    };
    let best = r[best_lag];
    if best < cfg.voicing_threshold {
        return F0Frame::UNVOICED;
    }
    let k = *peaks
        .iter()
        .find(|&&k| {
            let m = best_lag as f64 / k as f64;
            r[k] >= OCTAVE_RATIO * best && (m - m.round()).abs() <= MULTIPLE_TOL
        })
        .expect("best peak satisfies the guard");
    let (a, b, c) = (r[k - 1], r[k], r[k + 1]);
    let denom = a - 2.0 * b + c;
    let delta = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let f0 = (sr / (k as f64 + delta)).clamp(cfg.f0_min, cfg.f0_max);
    F0Frame::voiced(f0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cleaning_removes_glitches() {
        let v = F0Frame::voiced;
        let u = F0Frame::UNVOICED;
        let out = clean_runs(vec![v(500.0), u, v(100.0), v(101.0), v(50.0), v(102.0), v(103.0), u, v(90.0), v(91.0), u]);
        assert!(!out[0].voiced);
        assert!(!out[8].voiced && !out[9].voiced);
        let run: Vec<f64> = out[2..7].iter().map(|f| f.f0_hz).collect();
        assert_eq!(run, vec![100.0, 101.0, 101.0, 102.0, 102.0]);
        let steady = vec![v(120.0); 6];
        assert_eq!(clean_runs(steady.clone()), steady);
    }
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn sine(freq: f64, secs: f64) -> Waveform {
        let n = (secs * 16000.0) as usize;
        Waveform::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn sines_are_tracked_within_one_percent() {
        let cfg = AudioConfig::default();
        for freq in [100.0, 150.0, 220.0, 330.0] {
            let c = extract_f0(&sine(freq, 1.0), &cfg).unwrap();
            assert_eq!(c.len(), cfg.frame_count(16000));
            for f in &c.frames[1..c.len() - 1] {
                assert!(f.voiced, "{freq} Hz frame unvoiced");
                assert!((f.f0_hz - freq).abs() < 0.01 * freq, "{freq}: {}", f.f0_hz);
            }
        }
    }

    #[test]
    fn silence_is_unvoiced() {
        let cfg = AudioConfig::default();
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let c = extract_f0(&w, &cfg).unwrap();
        assert_eq!(c.voiced_count(), 0);
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let cfg = AudioConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let w = Waveform::new((0..16000).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16000)
            .unwrap();
        let c = extract_f0(&w, &cfg).unwrap();
        let unvoiced = c.len() - c.voiced_count();
        // measured once with seed 7: every frame unvoiced
        assert_eq!(unvoiced, c.len());
        assert!(unvoiced as f64 >= 0.9 * c.len() as f64);
    }

    #[test]
    fn harmonic_tone_does_not_jump_octave() {
        let cfg = AudioConfig::default();
        let f0 = 120.0;
        let w = Waveform::new(
            (0..16000)
                .map(|i| {
                    (1..=10)
                        .map(|h| {
                            (0.3 / h as f64) * (2.0 * PI * f0 * h as f64 * i as f64 / 16000.0).sin()
                        })
                        .sum()
                })
                .collect(),
            16000,
        )
        .unwrap();
        let c = extract_f0(&w, &cfg).unwrap();
        for f in &c.frames {
            assert!(f.voiced && (f.f0_hz - f0).abs() < 1.2, "{}", f.f0_hz);
        }
    }

    #[test]
    fn contour_length_matches_mel() {
        let cfg = AudioConfig::default();
        let w = sine(200.0, 0.77);
        let m = crate::dsp::mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(extract_f0(&w, &cfg).unwrap().len(), m.n_frames);
    }
}
