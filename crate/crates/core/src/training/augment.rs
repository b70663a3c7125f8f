//! Time-stretch, gain and crop augmentation on cached features.

use rand::Rng;

use crate::dsp::{F0Contour, F0Frame, MelSpectrogram, MEL_BINS};

use super::TrainConfig;

/// One draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Output length is `round(T * stretch)`.
    pub stretch: f64,
    /// Power ratio; mel log-amplitudes shift by `ln(gain) / 2`.
    pub gain: f64,
    /// Crop length in frames; `None` keeps the whole (stretched) utterance.
    pub crop_frames: Option<usize>,
    /// Crop start as a fraction of the available offsets, in [0, 1).
    pub crop_offset: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        stretch: 1.0,
        gain: 1.0,
        crop_frames: None,
        crop_offset: 0.0,
    };

    pub fn draw(rng: &mut impl Rng, cfg: &TrainConfig, crop_frames: usize) -> Self {
        Self {
            stretch: rng.gen_range(cfg.stretch_min..=cfg.stretch_max),
            gain: rng.gen_range(cfg.gain_min..=cfg.gain_max),
            crop_frames: Some(crop_frames),
            crop_offset: rng.gen::<f64>(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub mel: MelSpectrogram,
    pub f0: F0Contour,
    /// Frames before padding; the loss mask covers exactly these.
    pub valid: usize,
}

/// Linear interpolation along time with the end frames aligned.
pub fn stretch_mel(mel: &MelSpectrogram, out_len: usize) -> MelSpectrogram {
    let t = mel.n_frames;
    let mut out = Vec::with_capacity(out_len * MEL_BINS);
    for i in 0..out_len {
        let x = source_pos(i, t, out_len);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(t - 1);
        let w = x - i0 as f64;
        let (a, b) = (mel.frame(i0), mel.frame(i1));
        out.extend(a.iter().zip(b).map(|(p, q)| p + w * (q - p)));
    }
    MelSpectrogram::new(out, out_len).expect("sized above")
}

/// Nearest-neighbour resampling of a contour onto the same time grid as
/// [`stretch_mel`].
pub fn stretch_contour(f0: &F0Contour, out_len: usize) -> F0Contour {
    let t = f0.len();
    F0Contour::new(
        (0..out_len)
            .map(|i| f0.frames[(source_pos(i, t, out_len).round() as usize).min(t - 1)])
            .collect(),
    )
}

fn source_pos(i: usize, t: usize, out_len: usize) -> f64 {
    if out_len <= 1 || t <= 1 {
        0.0
    } else {
        i as f64 * (t - 1) as f64 / (out_len - 1) as f64
    }
}

/// Applies stretch, crop and gain, then pads to a multiple of `factor` by
/// repeating the last mel frame; padded contour frames are unvoiced.
/// A crop longer than the stretched input stretches it further instead.
pub fn augment(mel: &MelSpectrogram, f0: &F0Contour, p: &AugmentParams, factor: usize) -> Augmented {
    assert_eq!(mel.n_frames, f0.len(), "mel and contour must be frame-aligned");
    assert!(mel.n_frames > 0, "cannot augment an empty utterance");
    let mut n = ((mel.n_frames as f64 * p.stretch).round() as usize).max(1);
    if let Some(c) = p.crop_frames {
        n = n.max(c);
    }
    let (mut m, mut c) = if n == mel.n_frames {
        (mel.clone(), f0.clone())
    } else {
        (stretch_mel(mel, n), stretch_contour(f0, n))
    };
    if let Some(len) = p.crop_frames.filter(|&len| len > 0 && len < n) {
        let start = ((p.crop_offset * (n - len + 1) as f64) as usize).min(n - len);
        m = MelSpectrogram::new(m.frames[start * MEL_BINS..(start + len) * MEL_BINS].to_vec(), len)
            .expect("sized above");
        c = F0Contour::new(c.frames[start..start + len].to_vec());
    }
    if p.gain != 1.0 {
        let shift = 0.5 * p.gain.ln();
        m.frames.iter_mut().for_each(|v| *v += shift);
    }
    let valid = m.n_frames;
    let padded = valid.div_ceil(factor).max(1) * factor;
    for _ in valid..padded {
        m.frames.extend_from_within((valid - 1) * MEL_BINS..valid * MEL_BINS);
        c.frames.push(F0Frame::UNVOICED);
    }
    m.n_frames = padded;
    Augmented { mel: m, f0: c, valid }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mel(t: usize) -> MelSpectrogram {
        MelSpectrogram::new((0..t * MEL_BINS).map(|i| (i as f64 * 0.013).sin()).collect(), t).unwrap()
    }

    fn contour(t: usize, voiced: impl Fn(usize) -> bool) -> F0Contour {
        F0Contour::new(
            (0..t)
                .map(|i| if voiced(i) { F0Frame::voiced(100.0 + i as f64) } else { F0Frame::UNVOICED })
                .collect(),
        )
    }

    #[test]
    fn identity_up_to_padding() {
        let (m, c) = (mel(100), contour(100, |i| i % 3 != 0));
        let a = augment(&m, &c, &AugmentParams::IDENTITY, 16);
        assert_eq!((a.mel.n_frames, a.valid), (112, 100));
        assert_eq!(&a.mel.frames[..100 * MEL_BINS], &m.frames[..]);
        assert_eq!(&a.f0.frames[..100], &c.frames[..]);
        for t in 100..112 {
            assert_eq!(a.mel.frame(t), m.frame(99));
            assert!(!a.f0.frames[t].voiced);
        }
    }

    #[test]
    fn stretch_doubles_length() {
        let p = AugmentParams {
            stretch: 2.0,
            ..AugmentParams::IDENTITY
        };
        let a = augment(&mel(100), &contour(100, |_| true), &p, 1);
        assert_eq!((a.mel.n_frames, a.f0.len()), (200, 200));
    }

    #[test]
    fn gain_shifts_log_amplitude_by_half_log() {
        let m = mel(32);
        let p = AugmentParams {
            gain: 0.25,
            ..AugmentParams::IDENTITY
        };
        let a = augment(&m, &contour(32, |_| true), &p, 16);
        for (x, y) in a.mel.frames.iter().zip(&m.frames) {
            assert!((x - y - 0.5 * 0.25f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn short_input_is_stretched_up_to_crop() {
        let p = AugmentParams {
            stretch: 0.7,
            crop_frames: Some(90),
            ..AugmentParams::IDENTITY
        };
        let a = augment(&mel(80), &contour(80, |_| true), &p, 16);
        assert_eq!((a.valid, a.mel.n_frames), (90, 96));
    }

    #[test]
    fn crop_takes_a_contiguous_window() {
        let m = mel(100);
        let p = AugmentParams {
            crop_frames: Some(40),
            crop_offset: 0.5,
            ..AugmentParams::IDENTITY
        };
        let a = augment(&m, &contour(100, |_| true), &p, 8);
        let start = (0.5 * 61.0) as usize;
        assert_eq!(a.valid, 40);
        assert_eq!(a.mel.frame(0), m.frame(start));
        assert_eq!(a.mel.frame(39), m.frame(start + 39));
    }

    proptest! {
        #[test]
        fn boundaries_scale_with_stretch(r in 0.7f64..1.35, t in 40usize..200, edge in 5usize..35) {
            let c = contour(t, |i| i >= edge);
            let n = (t as f64 * r).round() as usize;
            let s = stretch_contour(&c, n);
            let flags: Vec<bool> = s.frames.iter().map(|f| f.voiced).collect();
            // oracle: nearest-neighbour resampling of the flag sequence
            let oracle: Vec<bool> = (0..n)
                .map(|i| ((i as f64 * (t - 1) as f64 / (n - 1) as f64).round() as usize) >= edge)
                .collect();
            prop_assert_eq!(&flags, &oracle);
            let first = flags.iter().position(|&v| v).unwrap();
            let scaled = edge as f64 * (n - 1) as f64 / (t - 1) as f64;
            prop_assert!((first as f64 - scaled).abs() <= 1.0);
        }

        #[test]
        fn alignment_is_preserved(r in 0.5f64..2.0, g in 0.1f64..1.0, t in 20usize..150,
                                   crop in 16usize..120, u in 0.0f64..1.0) {
            let p = AugmentParams { stretch: r, gain: g, crop_frames: Some(crop), crop_offset: u };
            let a = augment(&mel(t), &contour(t, |i| i % 4 != 0), &p, 16);
            prop_assert_eq!(a.mel.n_frames, a.f0.len());
            prop_assert_eq!(a.mel.n_frames % 16, 0);
            prop_assert!(a.valid <= a.mel.n_frames && a.mel.n_frames < a.valid + 16);
            prop_assert!(a.f0.frames[a.valid..].iter().all(|f| !f.voiced));
        }
    }
}
