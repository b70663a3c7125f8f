//! Toy corpus and trained-model cache shared by the slow integration tests.
//!
//! Everything lives under the cargo test scratch dir, keyed by a hash of the
//! corpus, audio, model and training configuration, so a second run reuses
//! the trained checkpoints. An interrupted training run resumes from its last
//! checkpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use f0vc_core::dsp::{AudioConfig, F0Contour};
use f0vc_core::eval::{build_leakage_model, StudySetup};
use f0vc_core::model::{Model, ModelConfig};
use f0vc_core::synth::{generate_toy_corpus, ToyCorpusConfig};
use f0vc_core::training::{
    fnv1a, prepare_corpus, train, CorpusManifest, RunOutputs, Split, TrainConfig, Trainer,
    TrainingData, Utterance, LOG_HEADER,
};

/// Bump when model or training code changes in a way that invalidates
/// cached checkpoints.
const CACHE_VERSION: u32 = 1;

/// Serializes cache creation between tests of one binary.
static CACHE_LOCK: Mutex<()> = Mutex::new(());

pub const DEFAULT_ITERATIONS: u64 = 20_000;

pub fn iterations() -> u64 {
    std::env::var("F0VC_ACCEPTANCE_ITERS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_ITERATIONS)
}

pub struct Toy {
    pub root: PathBuf,
    pub work: PathBuf,
    pub audio: AudioConfig,
    pub manifest: CorpusManifest,
    pub data: TrainingData,
    pub held_out: Vec<Utterance>,
    /// Training-split contours per speaker.
    pub ground_truth: Vec<Vec<F0Contour>>,
}

impl Toy {
    pub fn setup(&self, gl_iters: usize) -> StudySetup<'_> {
        StudySetup {
            audio: &self.audio,
            stats: &self.data.stats,
            held_out: &self.held_out,
            ground_truth: &self.ground_truth,
            gl_iters,
        }
    }
}

fn scratch() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("f0vc-toy")
}

fn key(parts: &[String]) -> String {
    format!("{:016x}", fnv1a(parts.join("\n").as_bytes()))
}

/// Generates and prepares the default toy corpus once.
pub fn toy() -> Toy {
    let corpus_cfg = ToyCorpusConfig::default();
    let audio = AudioConfig::default();
    let root = scratch().join(key(&[
        CACHE_VERSION.to_string(),
        format!("{corpus_cfg:?}"),
        format!("{audio:?}"),
    ]));
    let corpus = root.join("corpus");
    let work = root.join("work");
    let done = root.join("prepared");
    let guard = CACHE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    if !done.exists() {
        let _ = fs::remove_dir_all(&root);
        generate_toy_corpus(&corpus, &corpus_cfg).expect("toy corpus");
        prepare_corpus(&corpus, &work, &audio).expect("prepare");
        fs::write(&done, b"").unwrap();
    }
    drop(guard);
    let manifest = CorpusManifest::load(&work).expect("manifest");
    let data = TrainingData::load(&manifest, &work).expect("training data");
    let held_out = manifest.load_split(&work, Split::Test).expect("held-out");
    let ground_truth = (0..manifest.n_speakers())
        .map(|s| data.items.iter().filter(|u| u.speaker == s).map(|u| u.f0.clone()).collect())
        .collect();
    Toy { root, work, audio, manifest, data, held_out, ground_truth }
}

pub fn train_config() -> TrainConfig {
    TrainConfig { lr: 1e-3, iterations: iterations(), checkpoint_every: 1000, ..TrainConfig::default() }
}

pub fn model_config(toy: &Toy, use_f0: bool) -> ModelConfig {
    let (mel_mean, mel_std) = toy.data.mel_moments();
    ModelConfig { mel_mean, mel_std, use_f0, ..ModelConfig::desk_scale(toy.manifest.n_speakers()) }
}

/// A finished training run and its full per-iteration loss history.
pub struct Run {
    pub trainer: Trainer,
    pub totals: Vec<f64>,
}

fn read_totals(log: &Path, keep: usize) -> Vec<f64> {
    let text = fs::read_to_string(log).unwrap_or_default();
    text.lines()
        .skip(1)
        .take(keep)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

fn run_cached(toy: &Toy, name: &str, cfg: TrainConfig, fresh: impl FnOnce() -> Model) -> Run {
    let dir = toy.root.join(key(&[
        CACHE_VERSION.to_string(),
        name.to_string(),
        cfg.to_text(),
    ]));
    let _guard = CACHE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    fs::create_dir_all(&dir).unwrap();
    let ck = dir.join(format!("{name}.ck"));
    let log = dir.join(format!("{name}.csv"));
    let mut trainer = if ck.exists() {
        Trainer::load_file(&ck, None).expect("cached checkpoint")
    } else {
        Trainer::new(fresh(), cfg.clone()).unwrap()
    };
    // drop rows logged after the last checkpoint of an interrupted run
    let done = trainer.iteration as usize;
    let kept = read_totals(&log, done);
    assert_eq!(kept.len(), done, "log of {name} is shorter than its checkpoint");
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for l in fs::read_to_string(&log).unwrap_or_default().lines().skip(1).take(done) {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(&log, text).unwrap();
    if trainer.iteration < cfg.iterations {
        eprintln!("training {name}: {} -> {} iterations", trainer.iteration, cfg.iterations);
        let out = RunOutputs { checkpoint: Some(ck.clone()), log: Some(log.clone()) };
        train(&mut trainer, &toy.data, cfg.iterations, &out, |_| {}).expect("training");
    }
    let totals = read_totals(&log, usize::MAX);
    Run { trainer, totals }
}

pub fn trained(toy: &Toy, use_f0: bool) -> Run {
    let name = if use_f0 { "f0" } else { "baseline" };
    let mcfg = model_config(toy, use_f0);
    let cfg = train_config();
    run_cached(toy, &format!("{name}-{:016x}", fnv1a(mcfg.to_text().as_bytes())), cfg, || {
        Model::new(mcfg.clone()).unwrap()
    })
}

/// The no-F0 decoder trained behind the F0 model's frozen encoder.
pub fn leakage_decoder(toy: &Toy, f0_model: &Model) -> Run {
    let tag = fnv1a(&{
        let mut buf = Vec::new();
        f0_model.save(&mut buf).unwrap();
        buf
    });
    run_cached(toy, &format!("leakage-{tag:016x}"), train_config(), || {
        build_leakage_model(f0_model).unwrap()
    })
}
