use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use f0vc_core::config::{ConfigError, RunConfig};
use f0vc_core::dsp::{
    extract_f0, griffin_lim, load_wav, mel_spectrogram, write_matrix_file, write_wav,
};
use f0vc_core::eval::{
    bottleneck_leakage_experiment, conversion_pairs, median, run_conversion_study, voiced_log_f0_std,
    PairSet, StudyBundle, StudySetup,
};
use f0vc_core::f0codec::{QuantizedF0, F0_BINS};
use f0vc_core::model::{F0Mode, Model};
use f0vc_core::synth::{generate_toy_corpus, ToyCorpusConfig};
use f0vc_core::training::{
    fnv1a, prepare_corpus, train, CorpusManifest, RunOutputs, Split, TrainError, Trainer,
    TrainingData,
};

#[derive(Parser)]
#[command(name = "f0vc", version, about = "F0-conditioned autoencoder voice conversion")]
struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic multi-speaker corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        utterances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Extract features, split 90/10 and compute per-speaker F0 statistics.
    Prepare {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Train on self-reconstruction.
    Train {
        #[arg(long)]
        work_dir: Option<PathBuf>,
        /// Train the baseline without F0 conditioning.
        #[arg(long)]
        no_f0: bool,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Convert one utterance to another speaker.
    Convert {
        #[arg(long)]
        work_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        src_speaker: String,
        #[arg(long)]
        tgt_speaker: String,
        /// natural | flat:<bin> | file:<path>
        #[arg(long, default_value = "natural")]
        f0: String,
        /// Output prefix; writes <out>.mel and <out>.wav.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an evaluation study and write its CSV/JSON bundle.
    Eval {
        #[arg(long)]
        work_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        study: Study,
        /// Baseline (no-F0) checkpoint for side-by-side reports.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        flat_bin: u16,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    Dist,
    Consistency,
    Flat,
    Leakage,
}

/// Error carrying its exit status.
#[derive(Debug)]
struct Exit(u8, anyhow::Error);

fn classify(e: anyhow::Error) -> Exit {
    for cause in e.chain() {
        if let Some(TrainError::NonFinite { .. }) = cause.downcast_ref::<TrainError>() {
            return Exit(4, e);
        }
        if cause.downcast_ref::<ConfigError>().is_some() || cause.downcast_ref::<Usage>().is_some() {
            return Exit(2, e);
        }
    }
    Exit(3, e)
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let Exit(code, err) = classify(e);
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    cfg.train.frames_per_second = cfg.frames_per_second();
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::Synth { out, utterances, seed } => {
            let files = generate_toy_corpus(
                &out,
                &ToyCorpusConfig {
                    utterances_per_speaker: utterances,
                    seed,
                    sample_rate: cfg.audio.sample_rate,
                    ..ToyCorpusConfig::default()
                },
            )?;
            println!("wrote {} utterances under {}", files.len(), out.display());
        }
        Cmd::Prepare { corpus, work_dir } => {
            if let Some(c) = corpus {
                cfg.paths.corpus = c;
            }
            if let Some(w) = work_dir {
                cfg.paths.work_dir = w;
            }
            let m = prepare_corpus(&cfg.paths.corpus, &cfg.paths.work_dir, &cfg.audio)?;
            record_artifacts(&cfg.paths.work_dir, &["manifest.txt".to_string()])?;
            println!(
                "{} speakers, {} train / {} test utterances",
                m.n_speakers(),
                m.count(Split::Train),
                m.count(Split::Test)
            );
            for s in &m.speakers {
                println!(
                    "  {:<12} mu {:.4} sigma {:.4} ({} voiced frames)",
                    s.id, s.stats.mu, s.stats.sigma, s.stats.n_frames
                );
            }
        }
        Cmd::Train {
            work_dir,
            no_f0,
            resume,
            iterations,
            seed,
            checkpoint,
        } => {
            if let Some(w) = work_dir {
                cfg.paths.work_dir = w;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cmd_train(&cfg, no_f0, resume, checkpoint)?;
        }
        Cmd::Convert {
            work_dir,
            checkpoint,
            src,
            src_speaker,
            tgt_speaker,
            f0,
            out,
        } => {
            if let Some(w) = work_dir {
                cfg.paths.work_dir = w;
            }
            let ck = checkpoint.unwrap_or_else(|| cfg.checkpoint_path(false));
            cmd_convert(&cfg, &ck, &src, &src_speaker, &tgt_speaker, &f0, &out)?;
        }
        Cmd::Eval {
            work_dir,
            checkpoint,
            study,
            baseline,
            flat_bin,
        } => {
            if let Some(w) = work_dir {
                cfg.paths.work_dir = w;
            }
            let ck = checkpoint.unwrap_or_else(|| cfg.checkpoint_path(false));
            cmd_eval(&cfg, &ck, study, baseline.as_deref(), flat_bin)?;
        }
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, no_f0: bool, resume: bool, checkpoint: Option<PathBuf>) -> Result<()> {
    let work = &cfg.paths.work_dir;
    let manifest = CorpusManifest::load(work).context("loading manifest (run `f0vc prepare` first)")?;
    let data = TrainingData::load(&manifest, work)?;
    let mut model_cfg = cfg.model_config(manifest.n_speakers(), data.mel_moments())?;
    model_cfg.use_f0 = !no_f0;
    let ck = checkpoint.unwrap_or_else(|| cfg.checkpoint_path(no_f0));
    let log = work.join(if no_f0 { "train_log_nof0.csv" } else { "train_log.csv" });
    let mut trainer = if resume && ck.exists() {
        let t = Trainer::load_file(&ck, Some(&model_cfg))?;
        println!("resuming from iteration {}", t.iteration);
        t
    } else {
        if log.exists() {
            fs::remove_file(&log).with_context(|| format!("removing {}", log.display()))?;
        }
        Trainer::new(Model::new(model_cfg)?, cfg.train.clone())?
    };
    let until = cfg.train.iterations;
    let outputs = RunOutputs {
        checkpoint: Some(ck.clone()),
        log: Some(log.clone()),
    };
    let every = (until / 20).max(1);
    let records = train(&mut trainer, &data, until, &outputs, |r| {
        if (r.iteration + 1) % every == 0 {
            println!(
                "iter {:>7}  loss {:.4}  pre {:.4}  post {:.4}  code {:.4}",
                r.iteration + 1,
                r.total,
                r.mel_pre,
                r.mel_post,
                r.code
            );
        }
    })?;
    if records.is_empty() && !ck.exists() {
        trainer.save_file(&ck)?;
    }
    record_artifacts(work, &[rel(work, &ck), rel(work, &log)])?;
    println!(
        "trained to iteration {} (use_f0={}), checkpoint {}",
        trainer.iteration,
        trainer.model.config.use_f0,
        ck.display()
    );
    Ok(())
}

fn parse_f0_mode(spec: &str, n_frames: usize) -> Result<F0Mode> {
    if spec == "natural" {
        return Ok(F0Mode::Natural);
    }
    if let Some(b) = spec.strip_prefix("flat:") {
        let bin: u16 = b.parse().map_err(|_| Usage(format!("bad flat bin {b:?}")))?;
        if bin as usize >= F0_BINS {
            bail!(Usage(format!("flat bin must be below {F0_BINS}")));
        }
        return Ok(F0Mode::Flat(bin));
    }
    if let Some(p) = spec.strip_prefix("file:") {
        let text = fs::read_to_string(p).with_context(|| format!("reading F0 file {p}"))?;
        let bins = text
            .split_whitespace()
            .map(|t| match t.parse::<u16>() {
                Ok(b) if (b as usize) < F0_BINS => Ok(b),
                _ => bail!("malformed F0 file {p}: bad bin {t:?}"),
            })
            .collect::<Result<Vec<u16>>>()?;
        if bins.len() != n_frames {
            bail!("F0 file {p} has {} frames, the source has {n_frames}", bins.len());
        }
        return Ok(F0Mode::External(QuantizedF0 { bins }));
    }
    bail!(Usage(format!(
        "unknown --f0 mode {spec:?} (expected natural, flat:<bin> or file:<path>)"
    )))
}

fn cmd_convert(
    cfg: &RunConfig,
    ck: &Path,
    src: &Path,
    src_speaker: &str,
    tgt_speaker: &str,
    f0: &str,
    out: &Path,
) -> Result<()> {
    let manifest = CorpusManifest::load(&cfg.paths.work_dir)?;
    let model = Trainer::load_file(ck, None)?.model;
    let idx = |id: &str| {
        manifest
            .speaker_index(id)
            .ok_or_else(|| anyhow::anyhow!("unknown speaker {id:?}"))
    };
    let (s, t) = (idx(src_speaker)?, idx(tgt_speaker)?);
    let wav = load_wav(src, cfg.audio.sample_rate)?;
    let mel = mel_spectrogram(&wav, &cfg.audio)?;
    let contour = extract_f0(&wav, &cfg.audio)?;
    let mode = parse_f0_mode(f0, mel.n_frames)?;
    let stats = manifest.speakers[s].stats;
    let out_mel = model.convert(&mel, &contour, Some(&stats), &model.speaker(s)?, &model.speaker(t)?, &mode)?;
    let (mel_path, wav_path) = (out.with_extension("mel"), out.with_extension("wav"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_matrix_file(&mel_path, &out_mel.to_matrix())?;
    write_wav(&wav_path, &griffin_lim(&out_mel, &cfg.audio, cfg.gl_iters)?)?;
    println!("F0 mode: {f0}");
    println!("{src_speaker} -> {tgt_speaker}: {} frames", out_mel.n_frames);
    println!("wrote {} and {}", mel_path.display(), wav_path.display());
    Ok(())
}

fn emit(out_dir: &Path, written: &mut Vec<String>, prefix: &str, b: &StudyBundle) -> Result<()> {
    print_bundle(prefix, b);
    for name in b.write(out_dir, prefix)? {
        written.push(format!("eval/{name}"));
    }
    Ok(())
}

fn print_bundle(label: &str, b: &StudyBundle) {
    for d in &b.directions {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "{label:<9} {:<13} n={:<3} js(conv,tgt)={}  js(src,tgt)={}  |err| median={}  flat std={}  corr(input)={}  corr(pseudo)={}",
            d.direction.name(),
            d.conversions,
            f(d.js_converted_vs_target),
            f(d.js_source_vs_target),
            f(d.consistency_abs_median),
            f(d.flatness_median_std),
            f(d.corr_input_mean),
            f(d.corr_pseudo_mean)
        );
    }
}

fn cmd_eval(cfg: &RunConfig, ck: &Path, study: Study, baseline: Option<&Path>, flat_bin: u16) -> Result<()> {
    let work = &cfg.paths.work_dir;
    let manifest = CorpusManifest::load(work)?;
    let trainer = Trainer::load_file(ck, None)?;
    let model = &trainer.model;
    let held_out = manifest.load_split(work, Split::Test)?;
    let data = TrainingData::load(&manifest, work)?;
    let stats = manifest.stats();
    let gt: Vec<Vec<_>> = (0..manifest.n_speakers())
        .map(|s| data.items.iter().filter(|u| u.speaker == s).map(|u| u.f0.clone()).collect())
        .collect();
    let setup = StudySetup {
        audio: &cfg.audio,
        stats: &stats,
        held_out: &held_out,
        ground_truth: &gt,
        gl_iters: cfg.gl_iters,
    };
    let out_dir = work.join("eval");
    let pairs = conversion_pairs(&stats, PairSet::CrossGroup);
    let mut written = Vec::new();
    match study {
        Study::Dist | Study::Consistency => {
            let name = if matches!(study, Study::Dist) { "dist" } else { "consistency" };
            let b = run_conversion_study(model, &setup, &pairs, &F0Mode::Natural)?;
            emit(&out_dir, &mut written, &format!("{name}_model"), &b)?;
            if let Some(p) = baseline {
                let base = Trainer::load_file(p, None)?.model;
                let bb = run_conversion_study(&base, &setup, &pairs, &F0Mode::Natural)?;
                emit(&out_dir, &mut written, &format!("{name}_baseline"), &bb)?;
            }
        }
        Study::Flat => {
            let nat = run_conversion_study(model, &setup, &pairs, &F0Mode::Natural)?;
            let flat = run_conversion_study(model, &setup, &pairs, &F0Mode::Flat(flat_bin))?;
            emit(&out_dir, &mut written, "flat_natural", &nat)?;
            emit(&out_dir, &mut written, "flat_flat", &flat)?;
            let std_of = |b: &StudyBundle| {
                let v: Vec<f64> = b
                    .conversions
                    .iter()
                    .filter_map(|c| voiced_log_f0_std(&c.converted_f0))
                    .collect();
                median(&v)
            };
            let (n, f) = (std_of(&nat), std_of(&flat));
            println!("median voiced log-F0 std: natural {n:.4}, flat:{flat_bin} {f:.4}, ratio {:.3}", f / n);
        }
        Study::Leakage => {
            let key = fnv1a(&fs::read(ck).with_context(|| format!("reading {}", ck.display()))?);
            let cache = work.join(format!("leakage_decoder_{key:016x}.model"));
            let cached = if cache.exists() {
                println!("using cached no-F0 decoder {}", cache.display());
                Some(Model::load(fs::File::open(&cache).map(std::io::BufReader::new)?, None)?)
            } else {
                println!("training no-F0 decoder on the frozen encoder ({} iterations)", cfg.train.iterations);
                None
            };
            let (report, decoder, no_f0, full) =
                bottleneck_leakage_experiment(model, cached, &data, &cfg.train, &setup, &pairs)?;
            if !cache.exists() {
                decoder.save(std::io::BufWriter::new(fs::File::create(&cache)?))?;
                written.push(rel(work, &cache));
            }
            emit(&out_dir, &mut written, "leakage_nof0", &no_f0)?;
            emit(&out_dir, &mut written, "leakage_f0", &full)?;
            let p = out_dir.join("leakage_report.json");
            fs::write(&p, report.to_json())?;
            written.push("eval/leakage_report.json".into());
            println!(
                "no-F0 decoder |corr(out, input)| = {:?}; F0 model corr(out, pseudo) = {:?}",
                report.no_f0_abs_corr_input, report.f0_model_corr_pseudo
            );
        }
    }
    record_artifacts(work, &written)?;
    Ok(())
}

fn rel(work: &Path, p: &Path) -> String {
    p.strip_prefix(work).unwrap_or(p).display().to_string()
}

/// Keeps `<work_dir>/artifacts.txt` listing every produced file.
fn record_artifacts(work: &Path, names: &[String]) -> Result<()> {
    let p = work.join("artifacts.txt");
    let mut set: BTreeSet<String> = fs::read_to_string(&p)
        .map(|t| t.lines().map(str::to_string).collect())
        .unwrap_or_default();
    set.extend(names.iter().cloned());
    let mut body: String = set.into_iter().collect::<Vec<_>>().join("\n");
    body.push('\n');
    fs::create_dir_all(work)?;
    fs::write(&p, body)?;
    Ok(())
}
