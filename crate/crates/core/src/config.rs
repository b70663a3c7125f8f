//! Run configuration: a flat `section.key = value` file.
//!
//! ```text
//! # comment
//! audio.hop = 256
//! model.scale = desk
//! model.conv_channels = 64
//! train.iterations = 20000
//! paths.corpus = data/corpus
//! paths.work_dir = work
//! ```

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dsp::AudioConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {msg}")]
    Value { key: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelScale {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub corpus: PathBuf,
    pub work_dir: PathBuf,
    /// Defaults to `<work_dir>/model.ck`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub audio: AudioConfig,
    pub model_scale: ModelScale,
    /// Model keys applied on top of the scale preset once the speaker count
    /// is known.
    pub model_overrides: Vec<(String, String)>,
    pub train: TrainConfig,
    pub paths: Paths,
    /// Griffin-Lim iterations used when rendering and re-analyzing output.
    pub gl_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            audio: AudioConfig::default(),
            model_scale: ModelScale::Desk,
            model_overrides: Vec::new(),
            train: TrainConfig::default(),
            paths: Paths {
                corpus: PathBuf::from("corpus"),
                work_dir: PathBuf::from("work"),
                checkpoint: None,
            },
            gl_iters: 32,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        msg: format!("cannot parse {v:?}"),
    })
}

fn set_audio(a: &mut AudioConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "sample_rate" => a.sample_rate = parse(key, v)?,
        "fft_size" => a.fft_size = parse(key, v)?,
        "hop" => a.hop = parse(key, v)?,
        "window" => a.window = parse(key, v)?,
        "mel_bins" => a.mel_bins = parse(key, v)?,
        "mel_fmin" => a.mel_fmin = parse(key, v)?,
        "mel_fmax" => a.mel_fmax = parse(key, v)?,
        "f0_min" => a.f0_min = parse(key, v)?,
        "f0_max" => a.f0_max = parse(key, v)?,
        "voicing_threshold" => a.voicing_threshold = parse(key, v)?,
        "log_floor" => a.log_floor = parse(key, v)?,
        _ => return Err(ConfigError::UnknownKey(format!("audio.{key}"))),
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                msg: "expected key = value".into(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    /// Sets one `section.key`; used for both the file and CLI overrides.
    pub fn set(&mut self, full_key: &str, v: &str) -> Result<()> {
        let (section, key) = full_key
            .split_once('.')
            .ok_or_else(|| ConfigError::UnknownKey(full_key.to_string()))?;
        let value_err = |msg: String| ConfigError::Value {
            key: full_key.to_string(),
            msg,
        };
        match section {
            "audio" => set_audio(&mut self.audio, key, v)?,
            "model" if key == "scale" => {
                self.model_scale = match v {
                    "desk" => ModelScale::Desk,
                    "full" => ModelScale::Full,
                    _ => return Err(value_err("expected desk or full".into())),
                }
            }
            "model" => {
                let mut probe = ModelConfig::desk_scale(1);
                probe.set(key, v).map_err(|e| match e {
                    crate::model::ModelError::Config(m) if m.starts_with("unknown") => {
                        ConfigError::UnknownKey(full_key.to_string())
                    }
                    e => value_err(e.to_string()),
                })?;
                self.model_overrides.retain(|(k, _)| k != key);
                self.model_overrides.push((key.to_string(), v.to_string()));
            }
            "train" => self.train.set(key, v).map_err(|e| {
                if e.to_string().contains("unknown") {
                    ConfigError::UnknownKey(full_key.to_string())
                } else {
                    value_err(e.to_string())
                }
            })?,
            "paths" => match key {
                "corpus" => self.paths.corpus = PathBuf::from(v),
                "work_dir" => self.paths.work_dir = PathBuf::from(v),
                "checkpoint" => self.paths.checkpoint = Some(PathBuf::from(v)),
                _ => return Err(ConfigError::UnknownKey(full_key.to_string())),
            },
            "eval" => match key {
                "gl_iters" => self.gl_iters = parse(full_key, v)?,
                _ => return Err(ConfigError::UnknownKey(full_key.to_string())),
            },
            _ => return Err(ConfigError::UnknownKey(full_key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, msg: String| ConfigError::Value {
            key: key.into(),
            msg,
        };
        self.audio.validate().map_err(|e| wrap("audio", e.to_string()))?;
        self.train.validate().map_err(|e| wrap("train", e.to_string()))?;
        Ok(())
    }

    /// Model configuration for `n_speakers` with mel standardization
    /// moments; explicit `model.mel_mean`/`model.mel_std` keys win.
    pub fn model_config(&self, n_speakers: usize, mel_moments: (f64, f64)) -> Result<ModelConfig> {
        let mut m = match self.model_scale {
            ModelScale::Desk => ModelConfig::desk_scale(n_speakers),
            ModelScale::Full => ModelConfig::full_scale(n_speakers),
        };
        m.mel_mean = mel_moments.0;
        m.mel_std = mel_moments.1;
        for (k, v) in &self.model_overrides {
            m.set(k, v).map_err(|e| ConfigError::Value {
                key: format!("model.{k}"),
                msg: e.to_string(),
            })?;
        }
        m.validate().map_err(|e| ConfigError::Value {
            key: "model".into(),
            msg: e.to_string(),
        })?;
        Ok(m)
    }

    pub fn checkpoint_path(&self, baseline: bool) -> PathBuf {
        match (&self.paths.checkpoint, baseline) {
            (Some(p), false) => p.clone(),
            _ => self
                .paths
                .work_dir
                .join(if baseline { "model_nof0.ck" } else { "model.ck" }),
        }
    }

    pub fn frames_per_second(&self) -> f64 {
        self.audio.frames_per_second()
    }
}
