use std::path::Path;

use hound::{SampleFormat, WavSpec};

use super::{resample, DspError, Result, Waveform};

fn wav_err(path: &Path, e: hound::Error) -> DspError {
    match e {
        hound::Error::IoError(source) => DspError::Io {
            path: path.display().to_string(),
            source,
        },
        hound::Error::Unsupported => {
            DspError::UnsupportedEncoding(format!("{}: unsupported wav layout", path.display()))
        }
        other => DspError::Wav {
            path: path.display().to_string(),
            message: other.to_string(),
        },
    }
}

/// Reads a mono PCM (8/16/24/32-bit int) or 32-bit float WAV and resamples it
/// to `sample_rate` when the file rate differs.
pub fn load_wav(path: &Path, sample_rate: u32) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::MultiChannel(spec.channels));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?
        }
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(DspError::UnsupportedEncoding(format!(
                "{}: {bits}-bit {fmt:?}",
                path.display()
            )))
        }
    };
    let w = Waveform::new(samples, spec.sample_rate)?;
    if w.sample_rate == sample_rate {
        Ok(w)
    } else {
        Ok(resample(&w, sample_rate))
    }
}

/// Writes 16-bit PCM mono, clipping to [-1, 1).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_i16(path: &Path, channels: u16, rate: u32, data: &[i16]) {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in data {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_i16(&p, 1, 16000, &vec![0; 16000]);
        let w = load_wav(&p, 16000).unwrap();
        assert_eq!(w.len(), 16000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_square_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sq.wav");
        let data: Vec<i16> = (0..800)
            .map(|i| if (i / 40) % 2 == 0 { 32767 } else { -32767 })
            .collect();
        write_i16(&p, 1, 16000, &data);
        let w = load_wav(&p, 16000).unwrap();
        let peak = 32767.0 / 32768.0;
        assert!(w.samples.iter().all(|&s| (s.abs() - peak).abs() < 1e-15));
    }

    #[test]
    fn stereo_is_rejected_with_channel_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        write_i16(&p, 2, 16000, &[0; 200]);
        let err = load_wav(&p, 16000).unwrap_err();
        assert!(matches!(err, DspError::MultiChannel(2)));
        assert!(err.to_string().contains('2'));
    }

    #[test]
    fn missing_file_errors() {
        let err = load_wav(Path::new("/nonexistent/x.wav"), 16000).unwrap_err();
        assert!(matches!(err, DspError::Io { .. }));
    }

    #[test]
    fn float_wav_and_roundtrip_write() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for i in 0..100 {
            w.write_sample((i as f32 / 100.0) - 0.5).unwrap();
        }
        w.finalize().unwrap();
        let a = load_wav(&p, 16000).unwrap();
        let q = dir.path().join("g.wav");
        write_wav(&q, &a).unwrap();
        let b = load_wav(&q, 16000).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((x - y).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn eight_khz_file_is_resampled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("8k.wav");
        let data: Vec<i16> = (0..8000)
            .map(|i| (10000.0 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 8000.0).sin()) as i16)
            .collect();
        write_i16(&p, 1, 8000, &data);
        let w = load_wav(&p, 16000).unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert!((w.len() as i64 - 16000).abs() <= 1);
    }
}
