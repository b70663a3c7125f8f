use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use f0vc_core::dsp::{extract_f0, mel_spectrogram, AudioConfig, Waveform};
use f0vc_core::eval::analyze_mel;
use f0vc_core::par;
use f0vc_core::synth::{default_speakers, synth_utterance};

fn voice(secs: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new(synth_utterance(&default_speakers()[0], secs, 16_000, &mut rng), 16_000).unwrap()
}

fn features(c: &mut Criterion) {
    let cfg = AudioConfig::default();
    let w = voice(5.0, 1);
    let mut g = c.benchmark_group("features_5s");
    for parallel in [false, true] {
        let label = if parallel { "rayon" } else { "sequential" };
        g.bench_with_input(BenchmarkId::new("mel+f0", label), &parallel, |b, &p| {
            par::set_enabled(p);
            b.iter(|| {
                let m = mel_spectrogram(black_box(&w), &cfg).unwrap();
                let f = extract_f0(black_box(&w), &cfg).unwrap();
                (m.n_frames, f.len())
            })
        });
    }
    g.finish();
}

fn eval_batch(c: &mut Criterion) {
    let cfg = AudioConfig::default();
    let mels: Vec<_> = (0..4)
        .map(|k| mel_spectrogram(&voice(1.5, 10 + k), &cfg).unwrap())
        .collect();
    let mut g = c.benchmark_group("griffin_lim_reanalysis_x4");
    g.sample_size(10);
    for parallel in [false, true] {
        let label = if parallel { "rayon" } else { "sequential" };
        g.bench_with_input(BenchmarkId::new("analyze_mel", label), &parallel, |b, &p| {
            par::set_enabled(p);
            b.iter(|| par::map_slice(&mels, |m| analyze_mel(m, &cfg, 8).unwrap().voiced_count()))
        });
    }
    g.finish();
    par::set_enabled(true);
}

criterion_group!(benches, features, eval_batch);
criterion_main!(benches);
