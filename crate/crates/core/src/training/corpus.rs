//! Corpus manifest, deterministic train/test split and cached features.
//!
//! Manifest records are tab-separated lines:
//!
//! ```text
//! speaker <id> <index> <mu> <sigma> <n_frames>
//! utt     <speaker id> <relative path> <train|test>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dsp::{
    extract_f0, load_wav, mel_spectrogram, read_matrix_file, write_matrix_file, AudioConfig,
    F0Contour, MelSpectrogram,
};
use crate::f0codec::{compute_stats, SpeakerF0Stats};
use crate::par;

use super::{Result, TrainError};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const FEATURE_DIR: &str = "features";
/// Fraction of each speaker's utterances held out.
pub const TEST_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UttEntry {
    /// Path relative to the corpus root, `/`-separated.
    pub path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEntry {
    pub id: String,
    pub index: usize,
    pub stats: SpeakerF0Stats,
    pub utterances: Vec<UttEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub speakers: Vec<SpeakerEntry>,
}

/// A loaded utterance with its cached features.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker: usize,
    pub path: String,
    pub mel: MelSpectrogram,
    pub f0: F0Contour,
}

impl CorpusManifest {
    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speaker_index(&self, id: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s.id == id)
    }

    pub fn stats(&self) -> Vec<SpeakerF0Stats> {
        self.speakers.iter().map(|s| s.stats).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.speakers
            .iter()
            .map(|s| s.utterances.iter().filter(|u| u.split == split).count())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, s) in self.speakers.iter().enumerate() {
            if s.index != i {
                return Err(TrainError::Manifest(format!(
                    "speaker {} has index {}, expected {i}",
                    s.id, s.index
                )));
            }
            for u in &s.utterances {
                if !seen.insert(u.path.as_str()) {
                    return Err(TrainError::Manifest(format!("utterance {} listed twice", u.path)));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.speakers {
            let st = &s.stats;
            writeln!(out, "speaker\t{}\t{}\t{:?}\t{:?}\t{}", s.id, s.index, st.mu, st.sigma, st.n_frames)
                .unwrap();
        }
        for s in &self.speakers {
            for u in &s.utterances {
                writeln!(out, "utt\t{}\t{}\t{}", s.id, u.path, u.split.as_str()).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |n: usize, m: &str| TrainError::Manifest(format!("line {}: {m}", n + 1));
        let mut speakers: Vec<SpeakerEntry> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["speaker", id, idx, mu, sigma, nf] => {
                    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
                    let stats = SpeakerF0Stats::new(
                        num(mu)?,
                        num(sigma)?,
                        nf.parse().map_err(|_| bad(n, "bad frame count"))?,
                    )
                    .map_err(|e| bad(n, &e.to_string()))?;
                    speakers.push(SpeakerEntry {
                        id: id.to_string(),
                        index: idx.parse().map_err(|_| bad(n, "bad index"))?,
                        stats,
                        utterances: Vec::new(),
                    });
                }
                ["utt", id, path, split] => {
                    let split = match *split {
                        "train" => Split::Train,
                        "test" => Split::Test,
                        _ => return Err(bad(n, "split must be train or test")),
                    };
                    let s = speakers
                        .iter_mut()
                        .find(|s| s.id == *id)
                        .ok_or_else(|| bad(n, "utterance for unknown speaker"))?;
                    s.utterances.push(UttEntry {
                        path: path.to_string(),
                        split,
                    });
                }
                _ => return Err(bad(n, "unrecognized record")),
            }
        }
        let m = Self { speakers };
        m.validate()?;
        Ok(m)
    }

    pub fn load(work_dir: &Path) -> Result<Self> {
        let p = work_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(|e| TrainError::io(&p, e))?;
        Self::from_text(&text)
    }

    /// Loads cached features for every utterance of the given split.
    pub fn load_split(&self, work_dir: &Path, split: Split) -> Result<Vec<Utterance>> {
        let entries: Vec<(usize, &UttEntry)> = self
            .speakers
            .iter()
            .flat_map(|s| s.utterances.iter().map(move |u| (s.index, u)))
            .filter(|(_, u)| u.split == split)
            .collect();
        par::map_slice(&entries, |&(speaker, u)| {
            let (mel, f0) = read_features(work_dir, &u.path)?;
            Ok(Utterance {
                speaker,
                path: u.path.clone(),
                mel,
                f0,
            })
        })
        .into_iter()
        .collect()
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Held-out set: the `round(n * 0.1)` (at least one when n >= 2) names with
/// the smallest hash.
pub fn split_files(names: &[String]) -> Vec<Split> {
    let n = names.len();
    let n_test = if n < 2 {
        0
    } else {
        ((n as f64 * TEST_FRACTION).round() as usize).max(1)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (fnv1a(names[i].as_bytes()), i));
    let mut out = vec![Split::Train; n];
    for &i in &order[..n_test] {
        out[i] = Split::Test;
    }
    out
}

pub fn feature_paths(work_dir: &Path, rel: &str) -> (PathBuf, PathBuf) {
    let base = work_dir.join(FEATURE_DIR).join(rel);
    (base.with_extension("mel"), base.with_extension("f0"))
}

pub fn read_features(work_dir: &Path, rel: &str) -> Result<(MelSpectrogram, F0Contour)> {
    let (mp, fp) = feature_paths(work_dir, rel);
    let mel = MelSpectrogram::from_matrix(&read_matrix_file(&mp)?)?;
    let f0 = F0Contour::from_matrix(&read_matrix_file(&fp)?)?;
    if mel.n_frames != f0.len() {
        return Err(TrainError::Data(format!(
            "{rel}: mel has {} frames, contour {}",
            mel.n_frames,
            f0.len()
        )));
    }
    Ok((mel, f0))
}

/// Scans `<root>/<speaker>/*.wav`, extracts features into the work dir,
/// splits each speaker 90/10 and computes log-F0 statistics on the training
/// split. The corpus directory is only read.
pub fn prepare_corpus(root: &Path, work_dir: &Path, audio: &AudioConfig) -> Result<CorpusManifest> {
    audio.validate()?;
    let mut by_speaker: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let rd = fs::read_dir(root).map_err(|e| TrainError::io(root, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| TrainError::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let id = entry.file_name().to_string_lossy().into_owned();
        let mut files = Vec::new();
        for f in fs::read_dir(entry.path()).map_err(|e| TrainError::io(&entry.path(), e))? {
            let f = f.map_err(|e| TrainError::io(&entry.path(), e))?;
            let name = f.file_name().to_string_lossy().into_owned();
            if name.to_ascii_lowercase().ends_with(".wav") {
                files.push(name);
            }
        }
        if files.is_empty() {
            return Err(TrainError::Data(format!("speaker directory {id} has no .wav files")));
        }
        files.sort();
        by_speaker.insert(id, files);
    }
    if by_speaker.len() < 2 {
        return Err(TrainError::Data(format!(
            "need at least 2 speaker directories, found {}",
            by_speaker.len()
        )));
    }

    let jobs: Vec<String> = by_speaker
        .iter()
        .flat_map(|(id, files)| files.iter().map(move |f| format!("{id}/{f}")))
        .collect();
    let results: Vec<Result<F0Contour>> = par::map_slice(&jobs, |rel| {
        let w = load_wav(&root.join(rel), audio.sample_rate)?;
        let mel = mel_spectrogram(&w, audio)?;
        let f0 = extract_f0(&w, audio)?;
        let (mp, fp) = feature_paths(work_dir, rel);
        if let Some(dir) = mp.parent() {
            fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        }
        write_matrix_file(&mp, &mel.to_matrix())?;
        write_matrix_file(&fp, &f0.to_matrix())?;
        Ok(f0)
    });
    let mut contours: BTreeMap<&str, F0Contour> = BTreeMap::new();
    for (rel, r) in jobs.iter().zip(results) {
        contours.insert(rel.as_str(), r?);
    }

    let mut speakers = Vec::new();
    for (index, (id, files)) in by_speaker.iter().enumerate() {
        let splits = split_files(files);
        let train: Vec<F0Contour> = files
            .iter()
            .zip(&splits)
            .filter(|(_, s)| **s == Split::Train)
            .map(|(f, _)| contours[format!("{id}/{f}").as_str()].clone())
            .collect();
        let stats = compute_stats(&train).map_err(|e| TrainError::Stats {
            speaker: id.clone(),
            source: e,
        })?;
        speakers.push(SpeakerEntry {
            id: id.clone(),
            index,
            stats,
            utterances: files
                .iter()
                .zip(splits)
                .map(|(f, split)| UttEntry {
                    path: format!("{id}/{f}"),
                    split,
                })
                .collect(),
        });
    }
    let manifest = CorpusManifest { speakers };
    fs::create_dir_all(work_dir).map_err(|e| TrainError::io(work_dir, e))?;
    let p = work_dir.join(MANIFEST_FILE);
    fs::write(&p, manifest.to_text()).map_err(|e| TrainError::io(&p, e))?;
    Ok(manifest)
}
