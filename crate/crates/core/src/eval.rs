//! Evaluation studies on converted speech: log-F0 distribution match,
//! consistency with the pseudo-F0 reference, flat-contour control and
//! bottleneck leakage.
//!
//! Converted mel-spectrograms are inverted with Griffin-Lim and re-analyzed
//! with the same pitch tracker that produced the ground-truth contours.
//! Unvoiced frames never enter any F0 statistic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::dsp::{extract_f0, griffin_lim, AudioConfig, DspError, F0Contour, MelSpectrogram};
use crate::f0codec::{pseudo_contour, SpeakerF0Stats};
use crate::model::{F0Mode, Model, ModelConfig, ModelError};
use crate::par;
use crate::training::{train, RunOutputs, TrainConfig, TrainError, Trainer, TrainingData, Utterance};

pub const DEFAULT_HIST_BINS: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("histogram has no voiced frames")]
    NoVoiced,
    #[error("histogram bin edges differ")]
    EdgeMismatch,
    #[error("contour lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Normalized histogram of voiced log-F0 over uniform bins.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<f64>,
}

impl F0Histogram {
    pub fn empty(lo: f64, hi: f64, n_bins: usize) -> Self {
        Self {
            lo,
            hi,
            counts: vec![0.0; n_bins],
        }
    }

    /// Default range spans the tracker's search range.
    pub fn for_audio(cfg: &AudioConfig) -> Self {
        Self::empty(cfg.f0_min.ln(), cfg.f0_max.ln(), DEFAULT_HIST_BINS)
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_of(&self, log_f0: f64) -> usize {
        let n = self.n_bins();
        let u = (log_f0 - self.lo) / (self.hi - self.lo);
        ((u * n as f64).floor().max(0.0) as usize).min(n - 1)
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * (self.hi - self.lo) / self.n_bins() as f64
    }

    pub fn add_contour(&mut self, c: &F0Contour) {
        for v in c.voiced_log_f0() {
            let k = self.bin_of(v);
            self.counts[k] += 1.0;
        }
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn masses(&self) -> Result<Vec<f64>> {
        let t = self.total();
        if t <= 0.0 {
            return Err(EvalError::NoVoiced);
        }
        Ok(self.counts.iter().map(|c| c / t).collect())
    }

    fn same_edges(&self, o: &Self) -> bool {
        self.lo == o.lo && self.hi == o.hi && self.n_bins() == o.n_bins()
    }

    /// Frame-weighted merge.
    pub fn merge(&mut self, o: &Self) -> Result<()> {
        if !self.same_edges(o) {
            return Err(EvalError::EdgeMismatch);
        }
        self.counts.iter_mut().zip(&o.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Histogram of a set of contours; errors when no frame is voiced.
pub fn f0_histogram<'a>(
    contours: impl IntoIterator<Item = &'a F0Contour>,
    template: &F0Histogram,
) -> Result<F0Histogram> {
    let mut h = F0Histogram::empty(template.lo, template.hi, template.n_bins());
    for c in contours {
        h.add_contour(c);
    }
    if h.total() == 0.0 {
        return Err(EvalError::NoVoiced);
    }
    Ok(h)
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(a: &F0Histogram, b: &F0Histogram) -> Result<f64> {
    if !a.same_edges(b) {
        return Err(EvalError::EdgeMismatch);
    }
    let (p, q) = (a.masses()?, b.masses()?);
    let kl = |x: f64, m: f64| if x > 0.0 { x * (x / m).ln() } else { 0.0 };
    let js: f64 = p
        .iter()
        .zip(&q)
        .map(|(&x, &y)| {
            let m = 0.5 * (x + y);
            0.5 * kl(x, m) + 0.5 * kl(y, m)
        })
        .sum();
    Ok(js.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            median: median(values),
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-frame log-F0 errors (converted minus reference) on frames voiced in
/// both contours.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub frames: Vec<usize>,
    pub reference: Vec<f64>,
    pub converted: Vec<f64>,
    pub errors: Vec<f64>,
    /// Frames voiced in exactly one of the two contours.
    pub voicing_mismatch: usize,
    pub total_frames: usize,
    /// Set when the reference has no voiced frame at all.
    pub reference_unvoiced: bool,
}

impl ConsistencyReport {
    pub fn summary(&self) -> Option<Summary> {
        Summary::of(&self.errors)
    }

    pub fn abs_errors(&self) -> Vec<f64> {
        self.errors.iter().map(|e| e.abs()).collect()
    }

    pub fn mismatch_rate(&self) -> f64 {
        if self.total_frames == 0 {
            0.0
        } else {
            self.voicing_mismatch as f64 / self.total_frames as f64
        }
    }

    /// Error histogram over `[-range, range]`, out-of-range errors clamped.
    pub fn error_histogram(&self, n_bins: usize, range: f64) -> Vec<f64> {
        let mut h = vec![0.0; n_bins];
        for e in &self.errors {
            let u = (e + range) / (2.0 * range);
            let k = ((u * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
            h[k] += 1.0;
        }
        h
    }
}

pub fn consistency_error(converted: &F0Contour, reference: &F0Contour) -> Result<ConsistencyReport> {
    if converted.len() != reference.len() {
        return Err(EvalError::Length(converted.len(), reference.len()));
    }
    let mut r = ConsistencyReport {
        frames: Vec::new(),
        reference: Vec::new(),
        converted: Vec::new(),
        errors: Vec::new(),
        voicing_mismatch: 0,
        total_frames: converted.len(),
        reference_unvoiced: reference.voiced_count() == 0,
    };
    for (t, (c, f)) in converted.frames.iter().zip(&reference.frames).enumerate() {
        match (c.log_f0(), f.log_f0()) {
            (Some(x), Some(y)) => {
                r.frames.push(t);
                r.reference.push(y);
                r.converted.push(x);
                r.errors.push(x - y);
            }
            (None, None) => {}
            _ => r.voicing_mismatch += 1,
        }
    }
    Ok(r)
}

/// Pearson correlation; `None` with fewer than 3 pairs or zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 3 {
        return None;
    }
    let (ma, mb) = (
        a[..n].iter().sum::<f64>() / n as f64,
        b[..n].iter().sum::<f64>() / n as f64,
    );
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Correlation of two contours over frames voiced in both.
pub fn contour_correlation(a: &F0Contour, b: &F0Contour) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = a
        .frames
        .iter()
        .zip(&b.frames)
        .filter_map(|(p, q)| Some((p.log_f0()?, q.log_f0()?)))
        .unzip();
    pearson(&x, &y)
}

/// Population standard deviation of the voiced log-F0 of one contour.
pub fn voiced_log_f0_std(c: &F0Contour) -> Option<f64> {
    let v: Vec<f64> = c.voiced_log_f0().collect();
    Summary::of(&v).filter(|s| s.n >= 2).map(|s| s.std)
}

/// Mel -> waveform -> pitch contour.
pub fn analyze_mel(mel: &MelSpectrogram, audio: &AudioConfig, gl_iters: usize) -> Result<F0Contour> {
    let w = griffin_lim(mel, audio, gl_iters)?;
    Ok(extract_f0(&w, audio)?)
}

/// Speakers whose log-F0 mean lies below the median of all speaker means.
pub fn low_pitch_group(stats: &[SpeakerF0Stats]) -> Vec<bool> {
    let mus: Vec<f64> = stats.iter().map(|s| s.mu).collect();
    let m = median(&mus);
    mus.iter().map(|&mu| mu < m).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Direction {
    LowToHigh,
    HighToLow,
    WithinGroup,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::LowToHigh => "low_to_high",
            Direction::HighToLow => "high_to_low",
            Direction::WithinGroup => "within_group",
        }
    }
}

/// Which (source, target) speaker pairs a study converts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSet {
    CrossGroup,
    All,
    SelfOnly,
}

pub fn conversion_pairs(stats: &[SpeakerF0Stats], set: PairSet) -> Vec<(usize, usize)> {
    let low = low_pitch_group(stats);
    let n = stats.len();
    let mut out = Vec::new();
    for s in 0..n {
        for t in 0..n {
            let keep = match set {
                PairSet::CrossGroup => low[s] != low[t],
                PairSet::All => true,
                PairSet::SelfOnly => s == t,
            };
            if keep {
                out.push((s, t));
            }
        }
    }
    out
}

pub fn direction(stats: &[SpeakerF0Stats], src: usize, tgt: usize) -> Direction {
    let low = low_pitch_group(stats);
    match (low[src], low[tgt]) {
        (true, false) => Direction::LowToHigh,
        (false, true) => Direction::HighToLow,
        _ => Direction::WithinGroup,
    }
}

/// One converted utterance, re-analyzed.
#[derive(Debug, Clone)]
pub struct Conversion {
    pub src: usize,
    pub tgt: usize,
    pub utterance: String,
    pub source_f0: F0Contour,
    /// Source contour mapped into the target's range.
    pub pseudo_f0: F0Contour,
    pub converted_f0: F0Contour,
}

impl Conversion {
    pub fn label(&self) -> String {
        format!("{}->{}:{}", self.src, self.tgt, self.utterance)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionSummary {
    pub direction: Direction,
    pub conversions: usize,
    pub js_converted_vs_target: Option<f64>,
    pub js_source_vs_target: Option<f64>,
    pub consistency_abs_median: Option<f64>,
    pub consistency: Option<Summary>,
    pub voicing_mismatch_rate: f64,
    pub flatness_median_std: Option<f64>,
    pub corr_input_mean: Option<f64>,
    pub corr_pseudo_mean: Option<f64>,
}

/// Everything a conversion study produces.
#[derive(Debug, Clone)]
pub struct StudyBundle {
    pub mode: F0Mode,
    pub conversions: Vec<Conversion>,
    pub histograms: BTreeMap<String, F0Histogram>,
    pub directions: Vec<DirectionSummary>,
}

/// Settings shared by all studies.
#[derive(Debug, Clone)]
pub struct StudySetup<'a> {
    pub audio: &'a AudioConfig,
    pub stats: &'a [SpeakerF0Stats],
    /// Held-out utterances to convert.
    pub held_out: &'a [Utterance],
    /// Per-speaker ground-truth contours for the distribution comparison.
    pub ground_truth: &'a [Vec<F0Contour>],
    pub gl_iters: usize,
}

/// Converts every held-out utterance of each source speaker to each target
/// and aggregates per direction.
pub fn run_conversion_study(
    model: &Model,
    setup: &StudySetup,
    pairs: &[(usize, usize)],
    mode: &F0Mode,
) -> Result<StudyBundle> {
    let jobs: Vec<(usize, usize, &Utterance)> = pairs
        .iter()
        .flat_map(|&(s, t)| {
            setup
                .held_out
                .iter()
                .filter(move |u| u.speaker == s)
                .map(move |u| (s, t, u))
        })
        .collect();
    let results = par::map_slice(&jobs, |&(s, t, u)| -> Result<Conversion> {
        let src = model.speaker(s)?;
        let tgt = model.speaker(t)?;
        let mel = model.convert(&u.mel, &u.f0, Some(&setup.stats[s]), &src, &tgt, mode)?;
        Ok(Conversion {
            src: s,
            tgt: t,
            utterance: u.path.clone(),
            source_f0: u.f0.clone(),
            pseudo_f0: pseudo_contour(&u.f0, &setup.stats[s], &setup.stats[t]),
            converted_f0: analyze_mel(&mel, setup.audio, setup.gl_iters)?,
        })
    });
    let conversions = results.into_iter().collect::<Result<Vec<_>>>()?;
    summarize(mode.clone(), conversions, setup)
}

/// Aggregates conversions; the result does not depend on their order.
pub fn summarize(mode: F0Mode, mut conversions: Vec<Conversion>, setup: &StudySetup) -> Result<StudyBundle> {
    conversions.sort_by(|a, b| (a.src, a.tgt, &a.utterance).cmp(&(b.src, b.tgt, &b.utterance)));
    let template = F0Histogram::for_audio(setup.audio);
    let mut by_dir: BTreeMap<Direction, Vec<&Conversion>> = BTreeMap::new();
    for c in &conversions {
        by_dir.entry(direction(setup.stats, c.src, c.tgt)).or_default().push(c);
    }
    let mut histograms = BTreeMap::new();
    let mut directions = Vec::new();
    for (dir, convs) in by_dir {
        let conv_hist = f0_histogram(convs.iter().map(|c| &c.converted_f0), &template).ok();
        let src_hist = f0_histogram(convs.iter().map(|c| &c.source_f0), &template).ok();
        let mut targets: Vec<usize> = convs.iter().map(|c| c.tgt).collect();
        targets.sort_unstable();
        targets.dedup();
        let gt_hist = f0_histogram(
            targets.iter().flat_map(|&t| setup.ground_truth[t].iter()),
            &template,
        )
        .ok();
        let js = |h: &Option<F0Histogram>| match (h, &gt_hist) {
            (Some(a), Some(b)) => js_divergence(a, b).ok(),
            _ => None,
        };
        let mut errors = Vec::new();
        let (mut mismatch, mut frames) = (0, 0);
        let mut stds = Vec::new();
        let (mut ci, mut cp) = (Vec::new(), Vec::new());
        for c in &convs {
            let r = consistency_error(&c.converted_f0, &c.pseudo_f0)?;
            errors.extend_from_slice(&r.errors);
            mismatch += r.voicing_mismatch;
            frames += r.total_frames;
            stds.extend(voiced_log_f0_std(&c.converted_f0));
            ci.extend(contour_correlation(&c.converted_f0, &c.source_f0));
            cp.extend(contour_correlation(&c.converted_f0, &c.pseudo_f0));
        }
        let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
        directions.push(DirectionSummary {
            direction: dir,
            conversions: convs.len(),
            js_converted_vs_target: js(&conv_hist),
            js_source_vs_target: js(&src_hist),
            consistency_abs_median: (!abs.is_empty()).then(|| median(&abs)),
            consistency: Summary::of(&errors),
            voicing_mismatch_rate: if frames == 0 { 0.0 } else { mismatch as f64 / frames as f64 },
            flatness_median_std: (!stds.is_empty()).then(|| median(&stds)),
            corr_input_mean: Summary::of(&ci).map(|s| s.mean),
            corr_pseudo_mean: Summary::of(&cp).map(|s| s.mean),
        });
        for (series, h) in [("converted", conv_hist), ("ground_truth", gt_hist)] {
            let h = h.unwrap_or_else(|| template.clone());
            histograms.insert(format!("{}/{series}", dir.name()), h);
        }
    }
    Ok(StudyBundle {
        mode,
        conversions,
        histograms,
        directions,
    })
}

impl StudyBundle {
    pub fn direction(&self, d: Direction) -> Option<&DirectionSummary> {
        self.directions.iter().find(|s| s.direction == d)
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_center,mass,series\n");
        for (series, h) in &self.histograms {
            // a series without voiced frames is written as all-zero mass
            let m = h.masses().unwrap_or_else(|_| vec![0.0; h.n_bins()]);
            for (k, mass) in m.iter().enumerate() {
                writeln!(s, "{:.6},{:.8},{series}", h.bin_center(k), mass).unwrap();
            }
        }
        s
    }

    pub fn consistency_csv(&self) -> Result<String> {
        let mut s = String::from("conversion,frame,reference,converted,error\n");
        for c in &self.conversions {
            let r = consistency_error(&c.converted_f0, &c.pseudo_f0)?;
            for i in 0..r.errors.len() {
                writeln!(
                    s,
                    "{},{},{:.6},{:.6},{:.6}",
                    c.label(),
                    r.frames[i],
                    r.reference[i],
                    r.converted[i],
                    r.errors[i]
                )
                .unwrap();
            }
        }
        Ok(s)
    }

    pub fn leakage_csv(&self) -> String {
        let mut s = String::from("pair,corr_input,corr_pseudo\n");
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for c in &self.conversions {
            writeln!(
                s,
                "{},{},{}",
                c.label(),
                fmt(contour_correlation(&c.converted_f0, &c.source_f0)),
                fmt(contour_correlation(&c.converted_f0, &c.pseudo_f0))
            )
            .unwrap();
        }
        s
    }

    /// Writes `<prefix>_histograms.csv`, `<prefix>_consistency.csv`,
    /// `<prefix>_leakage.csv` and `<prefix>_summary.json`.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<Vec<String>> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let files = [
            (format!("{prefix}_histograms.csv"), self.histogram_csv()),
            (format!("{prefix}_consistency.csv"), self.consistency_csv()?),
            (format!("{prefix}_leakage.csv"), self.leakage_csv()),
            (
                format!("{prefix}_summary.json"),
                serde_json::to_string_pretty(&self.directions).expect("plain data serializes"),
            ),
        ];
        let mut names = Vec::new();
        for (name, body) in files {
            let p = dir.join(&name);
            fs::write(&p, body).map_err(|e| io_err(&p, e))?;
            names.push(name);
        }
        Ok(names)
    }
}

fn io_err(p: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: p.display().to_string(),
        source,
    }
}

/// A no-F0 decoder trained on top of a frozen, already trained encoder.
pub fn build_leakage_model(f0_model: &Model) -> Result<Model> {
    let cfg = ModelConfig {
        use_f0: false,
        ..f0_model.config.clone()
    };
    let mut m = Model::new(cfg)?;
    for id in f0_model.store.ids() {
        let name = f0_model.store.name(id);
        if name.starts_with("enc.") {
            let dst = m.store.find(name).expect("same encoder layout");
            *m.store.value_mut(dst) = f0_model.store.value(id).clone();
        }
    }
    m.store.freeze_prefix("enc.");
    Ok(m)
}

/// Correlations from the leakage experiment, side by side with the
/// F0-conditioned model.
#[derive(Debug, Clone, Serialize)]
pub struct LeakageReport {
    /// Mean |corr(output F0, input F0)| of the no-F0 decoder.
    pub no_f0_abs_corr_input: Option<f64>,
    pub no_f0_corr_pseudo: Option<f64>,
    /// Mean corr(output F0, pseudo-F0) of the F0-conditioned model.
    pub f0_model_corr_pseudo: Option<f64>,
    pub f0_model_corr_input: Option<f64>,
    pub conversions: usize,
}

impl LeakageReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Trains a no-F0 decoder on the frozen encoder of `f0_model` (or reuses
/// `cached`), then compares output-F0 correlations on held-out conversions.
pub fn bottleneck_leakage_experiment(
    f0_model: &Model,
    cached: Option<Model>,
    data: &TrainingData,
    train_cfg: &TrainConfig,
    setup: &StudySetup,
    pairs: &[(usize, usize)],
) -> Result<(LeakageReport, Model, StudyBundle, StudyBundle)> {
    let decoder_model = match cached {
        Some(m) => m,
        None => {
            let mut t = Trainer::new(build_leakage_model(f0_model)?, train_cfg.clone())?;
            train(&mut t, data, train_cfg.iterations, &RunOutputs::default(), |_| {})?;
            t.model
        }
    };
    let no_f0 = run_conversion_study(&decoder_model, setup, pairs, &F0Mode::Natural)?;
    let full = run_conversion_study(f0_model, setup, pairs, &F0Mode::Natural)?;
    let corrs = |b: &StudyBundle, pseudo: bool, abs: bool| {
        let v: Vec<f64> = b
            .conversions
            .iter()
            .filter_map(|c| {
                let r = if pseudo { &c.pseudo_f0 } else { &c.source_f0 };
                contour_correlation(&c.converted_f0, r)
            })
            .map(|x| if abs { x.abs() } else { x })
            .collect();
        Summary::of(&v).map(|s| s.mean)
    };
    let report = LeakageReport {
        no_f0_abs_corr_input: corrs(&no_f0, false, true),
        no_f0_corr_pseudo: corrs(&no_f0, true, false),
        f0_model_corr_pseudo: corrs(&full, true, false),
        f0_model_corr_input: corrs(&full, false, false),
        conversions: no_f0.conversions.len(),
    };
    Ok((report, decoder_model, no_f0, full))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::F0Frame;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(hz: f64, n: usize) -> F0Contour {
        F0Contour::new(vec![F0Frame::voiced(hz); n])
    }

    fn template() -> F0Histogram {
        F0Histogram::for_audio(&AudioConfig::default())
    }

    #[test]
    fn constant_set_fills_one_bin() {
        let h = f0_histogram([&constant(200.0, 50)], &template()).unwrap();
        let m = h.masses().unwrap();
        let k = h.bin_of(200f64.ln());
        assert_eq!(m[k], 1.0);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_pitches_split_mass() {
        let (a, b) = (constant(150.0, 40), constant(300.0, 40));
        let h = f0_histogram([&a, &b], &template()).unwrap();
        let m = h.masses().unwrap();
        assert_eq!(m[h.bin_of(150f64.ln())], 0.5);
        assert_eq!(m[h.bin_of(300f64.ln())], 0.5);
    }

    #[test]
    fn unvoiced_frames_are_ignored() {
        let c = F0Contour::new(vec![F0Frame::UNVOICED, F0Frame::voiced(120.0), F0Frame::UNVOICED]);
        let h = f0_histogram([&c], &template()).unwrap();
        assert_eq!(h.total(), 1.0);
        assert!(matches!(f0_histogram([&F0Contour::unvoiced(9)], &template()), Err(EvalError::NoVoiced)));
    }

    #[test]
    fn merge_equals_joint_histogram() {
        let (a, b) = (constant(110.0, 30), constant(260.0, 90));
        let joint = f0_histogram([&a, &b], &template()).unwrap();
        let mut merged = f0_histogram([&a], &template()).unwrap();
        merged.merge(&f0_histogram([&b], &template()).unwrap()).unwrap();
        assert_eq!(joint, merged);
        assert!(merged.merge(&F0Histogram::empty(0.0, 1.0, 64)).is_err());
    }

    #[test]
    fn js_examples() {
        let a = f0_histogram([&constant(100.0, 10)], &template()).unwrap();
        let b = f0_histogram([&constant(400.0, 10)], &template()).unwrap();
        assert_eq!(js_divergence(&a, &a).unwrap(), 0.0);
        assert!((js_divergence(&a, &b).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let other = F0Histogram {
            counts: vec![1.0; 32],
            ..a.clone()
        };
        assert!(matches!(js_divergence(&a, &other), Err(EvalError::EdgeMismatch)));
    }

    proptest! {
        #[test]
        fn js_symmetric_and_bounded(xs in prop::collection::vec(60.0f64..500.0, 1..50),
                                    ys in prop::collection::vec(60.0f64..500.0, 1..50)) {
            let a = f0_histogram([&F0Contour::new(xs.iter().map(|&f| F0Frame::voiced(f)).collect())], &template()).unwrap();
            let b = f0_histogram([&F0Contour::new(ys.iter().map(|&f| F0Frame::voiced(f)).collect())], &template()).unwrap();
            let (ab, ba) = (js_divergence(&a, &b).unwrap(), js_divergence(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&ab));
        }
    }

    #[test]
    fn consistency_examples() {
        let r = constant(180.0, 20);
        let same = consistency_error(&r, &r).unwrap();
        assert!(same.errors.iter().all(|&e| e == 0.0));
        assert_eq!(same.mismatch_rate(), 0.0);

        let shifted = F0Contour::new(vec![F0Frame::voiced(180.0 * 0.1f64.exp()); 20]);
        let s = consistency_error(&shifted, &r).unwrap().summary().unwrap();
        assert!((s.mean - 0.1).abs() < 1e-12 && s.std < 1e-12);

        let d = consistency_error(&r, &F0Contour::unvoiced(20)).unwrap();
        assert!(d.reference_unvoiced && d.errors.is_empty());
        assert_eq!(d.voicing_mismatch, 20);
        assert!(consistency_error(&r, &constant(1.0, 3)).is_err());
    }

    #[test]
    fn correlation_sanity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..400).map(|_| rng.gen_range(4.0..6.0)).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        // permutation oracle: a shuffled copy carries no frame alignment
        let mut y = x.clone();
        y.shuffle(&mut rng);
        assert!(pearson(&x, &y).unwrap().abs() < 0.2);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
    }

    #[test]
    fn pairs_and_directions() {
        let stats: Vec<SpeakerF0Stats> = [4.6, 4.8, 5.35, 5.5]
            .iter()
            .map(|&mu| SpeakerF0Stats::new(mu, 0.1, 200).unwrap())
            .collect();
        let cross = conversion_pairs(&stats, PairSet::CrossGroup);
        assert_eq!(cross.len(), 8);
        assert_eq!(direction(&stats, 0, 3), Direction::LowToHigh);
        assert_eq!(direction(&stats, 2, 1), Direction::HighToLow);
        assert_eq!(direction(&stats, 2, 3), Direction::WithinGroup);
        assert_eq!(conversion_pairs(&stats, PairSet::All).len(), 16);
        assert_eq!(conversion_pairs(&stats, PairSet::SelfOnly), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn summaries_ignore_conversion_order() {
        let stats: Vec<SpeakerF0Stats> = [4.6, 5.4]
            .iter()
            .map(|&mu| SpeakerF0Stats::new(mu, 0.1, 200).unwrap())
            .collect();
        let audio = AudioConfig::default();
        let gt = vec![vec![constant(100.0, 30)], vec![constant(220.0, 30)]];
        let setup = StudySetup {
            audio: &audio,
            stats: &stats,
            held_out: &[],
            ground_truth: &gt,
            gl_iters: 1,
        };
        let mk = |s, t, hz: f64, k: usize| Conversion {
            src: s,
            tgt: t,
            utterance: format!("u{k}"),
            source_f0: constant(100.0 + k as f64, 30),
            pseudo_f0: constant(hz, 30),
            converted_f0: F0Contour::new((0..30).map(|i| F0Frame::voiced(hz + i as f64 + k as f64)).collect()),
        };
        let convs = vec![mk(0, 1, 220.0, 0), mk(0, 1, 230.0, 1), mk(1, 0, 100.0, 2)];
        let mut rev = convs.clone();
        rev.reverse();
        let a = summarize(F0Mode::Natural, convs, &setup).unwrap();
        let b = summarize(F0Mode::Natural, rev, &setup).unwrap();
        assert_eq!(format!("{:?}", a.directions), format!("{:?}", b.directions));
        assert_eq!(a.histogram_csv(), b.histogram_csv());
        let lh = a.direction(Direction::LowToHigh).unwrap();
        assert_eq!(lh.conversions, 2);
        assert!(lh.js_converted_vs_target.unwrap() < std::f64::consts::LN_2);
    }

    #[test]
    fn empty_pairs_give_empty_bundle() {
        let stats = vec![SpeakerF0Stats::new(4.6, 0.1, 200).unwrap()];
        let audio = AudioConfig::default();
        let setup = StudySetup {
            audio: &audio,
            stats: &stats,
            held_out: &[],
            ground_truth: &[vec![]],
            gl_iters: 1,
        };
        let mut cfg = ModelConfig::desk_scale(1);
        cfg.conv_channels = 4;
        let m = Model::new(cfg).unwrap();
        let b = run_conversion_study(&m, &setup, &[], &F0Mode::Natural).unwrap();
        assert!(b.conversions.is_empty() && b.directions.is_empty());
    }

    #[test]
    fn leakage_model_copies_and_freezes_encoder() {
        let mut cfg = ModelConfig::desk_scale(2);
        cfg.conv_channels = 4;
        cfg.dec_cell = 8;
        let f0m = Model::new(ModelConfig { init_seed: 5, ..cfg }).unwrap();
        let m = build_leakage_model(&f0m).unwrap();
        assert!(!m.config.use_f0);
        for id in m.store.ids() {
            let name = m.store.name(id);
            if name.starts_with("enc.") {
                assert_eq!(m.store.value(id), f0m.store.value(f0m.store.find(name).unwrap()));
                assert!(!m.store.is_optimized(id));
            }
        }
    }
}
