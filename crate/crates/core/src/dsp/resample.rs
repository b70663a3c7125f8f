use super::Waveform;

const ZERO_CROSSINGS: f64 = 32.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn blackman(u: f64) -> f64 {
    // u in [-1, 1]
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let a = std::f64::consts::PI * u;
    0.42 + 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
}

/// Band-limited resampling with a Blackman-windowed sinc kernel.
/// Output length is `round(len * to / from)`.
pub fn resample(w: &Waveform, to_rate: u32) -> Waveform {
    if w.sample_rate == to_rate || w.samples.is_empty() {
        return Waveform {
            samples: w.samples.clone(),
            sample_rate: to_rate,
        };
    }
    let ratio = to_rate as f64 / w.sample_rate as f64;
    let out_len = (w.samples.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let half = ZERO_CROSSINGS / cutoff;
    let x = &w.samples;
    let samples = crate::par::map_range(out_len, |j| {
        let t = j as f64 / ratio;
        let lo = ((t - half).ceil().max(0.0)) as usize;
        let hi = ((t + half).floor() as usize).min(x.len() - 1);
        let mut acc = 0.0;
        for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let d = t - k as f64;
            acc += xk * cutoff * sinc(cutoff * d) * blackman(d / half);
        }
        acc
    });
    Waveform {
        samples,
        sample_rate: to_rate,
    }
}
