//! End-to-end experiment stages over a work directory.
//!
//! Layout under the work dir:
//!
//! ```text
//! corpus/        synthesized corpus (manifest.csv, raw/*.csv)
//! features/      sessions.csv, segments.csv, summary.json, <session>.bin
//! acf/           <session>.bin, standardizer.bin
//! checkpoints/   segment.ckpt, session.ckpt, baseline.ckpt, embeddings.bin
//! reports/       histories, predictions, metrics, confusion matrices, plots
//! ```
//!
//! `.bin` files use the checksummed container format. Feature bundles hold
//! one `seg/<k>` array of shape `[channels, frames]` per standardized
//! segment; ACF bundles hold one `acf/<k>` array of shape `[M², D+1]`.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::acf::{acf_matrix, apply_acf_standardizer, fit_acf_standardizer, AcfMatrix, AcfStandardizer};
use crate::autodiff::Real;
use crate::container::{Container, NamedArray};
use crate::corpus::{read_manifest, sessions_from_manifest, SegmentationRule, SeverityClass, Split};
use crate::diagnostics::gradient_check_suite;
use crate::dsp::{
    ingest_feature_csv, load_wav, mfcc_with, normalize_peak, slice_segment, standardize_channels, ChannelSeries,
    FeatureSource, MfccConfig,
};
use crate::error::{bail, Error, Result};
use crate::evaluation::{
    accuracy_by_segment_count, buckets_svg, chance_f1, confusion, confusion_svg, metrics, misclassification_report,
    plurality_vote, write_confusion_csv, write_csv, MetricsRow, Prediction,
};
use crate::models::{
    build_baseline_cnn, build_dilated_cnn, build_session_lstm, predict_segments,
    BaselineCnnConfig, DilatedCnnConfig, SegmentModel, SessionLstmConfig,
};
use crate::synth::{generate_corpus, SynthSpec};
use crate::training::{
    load_checkpoint, load_embeddings, save_checkpoint, save_embeddings, session_logits, train_segment_model,
    train_session_model, AdamSnapshot, Checkpoint, LabeledInput, ModelKind, Precision, SessionEmbeddings,
    SessionSequence, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Corpus manifest; defaults to `<work_dir>/corpus/manifest.csv`.
    pub manifest: Option<PathBuf>,
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            work_dir: PathBuf::from("work"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesConfig {
    /// Overrides the source inferred from the channel count.
    pub source: Option<FeatureSource>,
    /// Required channel count of feature CSVs, if known.
    pub expected_channels: Option<usize>,
    /// Frame rate assumed when checking the ACF delay against segment length.
    pub frame_rate_hz: f64,
    pub segmentation: SegmentationRule,
    pub mfcc: MfccConfig,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        Self {
            source: None,
            expected_channels: None,
            frame_rate_hz: 100.0,
            segmentation: SegmentationRule::default(),
            mfcc: MfccConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: [0.6, 0.2, 0.2],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcfConfig {
    pub max_delay: usize,
}

impl Default for AcfConfig {
    fn default() -> Self {
        Self { max_delay: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// Share of most confident segments entering the plurality vote.
    pub vote_fraction: f64,
    /// Lower edges of the segment-count buckets.
    pub bucket_edges: Vec<usize>,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            vote_fraction: 0.5,
            bucket_edges: vec![1, 2, 3, 4, 5, 6],
            seed: 0,
        }
    }
}

/// Hyperparameter grid; each list is one axis of the Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub parallel_filters: Vec<usize>,
    pub c6_filters: Vec<usize>,
    pub c6_kernel: Vec<usize>,
    pub d2_units: Vec<usize>,
    pub dropout: Vec<f64>,
    /// LSTM candidates for the session stage.
    pub session_models: Vec<SessionLstmConfig>,
    /// Caps training length of every candidate when set.
    pub max_epochs: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            parallel_filters: vec![16, 32],
            c6_filters: vec![8, 16],
            c6_kernel: vec![3, 4],
            d2_units: vec![8, 16],
            dropout: vec![0.4, 0.5],
            session_models: vec![SessionLstmConfig::tv(), SessionLstmConfig::mfcc(), SessionLstmConfig::formant()],
            max_epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// When set, replaces every component seed.
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub features: FeaturesConfig,
    pub split: SplitConfig,
    pub acf: AcfConfig,
    pub synth: SynthSpec,
    /// Model overrides; by default the preset for the feature source is used.
    pub segment_model: Option<DilatedCnnConfig>,
    pub session_model: Option<SessionLstmConfig>,
    pub baseline_model: Option<BaselineCnnConfig>,
    pub train_segment: TrainConfig,
    pub train_session: TrainConfig,
    pub train_baseline: TrainConfig,
    pub evaluation: EvaluationConfig,
    pub gridsearch: GridConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            paths: PathsConfig::default(),
            features: FeaturesConfig::default(),
            split: SplitConfig::default(),
            acf: AcfConfig::default(),
            synth: SynthSpec::default(),
            segment_model: None,
            session_model: None,
            baseline_model: None,
            train_segment: TrainConfig::segment(),
            train_session: TrainConfig::session(),
            train_baseline: TrainConfig::segment(),
            evaluation: EvaluationConfig::default(),
            gridsearch: GridConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Copies the master seed, when set, into every component.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.synth.seed = s;
            self.split.seed = s;
            self.train_segment.seed = s;
            self.train_session.seed = s;
            self.train_baseline.seed = s;
            self.evaluation.seed = s;
        }
        self
    }

    pub fn with_precision(mut self, precision: Option<Precision>) -> Self {
        if let Some(p) = precision {
            self.train_segment.precision = p;
            self.train_session.precision = p;
            self.train_baseline.precision = p;
        }
        self
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths
            .manifest
            .clone()
            .unwrap_or_else(|| self.paths.work_dir.join("corpus").join("manifest.csv"))
    }

    /// Every schema and cross-field violation, in a stable order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Some(m) = &self.paths.manifest {
            if !m.is_file() {
                p.push(format!("paths.manifest: {} does not exist", m.display()));
            }
        }
        let f = &self.features;
        if !(f.frame_rate_hz > 0.0 && f.frame_rate_hz.is_finite()) {
            p.push(format!("features.frame_rate_hz: {} must be positive", f.frame_rate_hz));
        }
        let s = &f.segmentation;
        if !(s.min_s > 0.0 && s.min_s <= s.window_s && s.shift_s > 0.0) {
            p.push(format!(
                "features.segmentation: need 0 < min_s <= window_s and shift_s > 0 (got {}, {}, {})",
                s.min_s, s.window_s, s.shift_s
            ));
        }
        let shortest = (s.min_s * f.frame_rate_hz).floor() as usize;
        if self.acf.max_delay >= shortest {
            p.push(format!(
                "acf.max_delay: D = {} must be below the shortest segment length of {} frames",
                self.acf.max_delay, shortest
            ));
        }
        if self.acf.max_delay == 0 {
            p.push("acf.max_delay: must be at least 1".into());
        }
        let r = self.split.ratios;
        if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            p.push(format!("split.ratios: {r:?} must be positive and sum to 1"));
        }
        p.extend(self.synth.problems());
        if let Some(m) = &self.segment_model {
            if let Err(e) = m.validate() {
                p.push(format!("segment_model: {e}"));
            }
            if m.input_delay_bins != self.acf.max_delay + 1 {
                p.push(format!(
                    "segment_model.input_delay_bins: {} does not match acf.max_delay + 1 = {}",
                    m.input_delay_bins,
                    self.acf.max_delay + 1
                ));
            }
        }
        if let Some(m) = &self.session_model {
            if let Err(e) = m.validate() {
                p.push(format!("session_model: {e}"));
            }
            if let Some(seg) = &self.segment_model {
                if m.input_size != seg.d1_units {
                    p.push(format!(
                        "session_model.input_size: {} does not match segment_model.d1_units {}",
                        m.input_size, seg.d1_units
                    ));
                }
            }
        }
        if let Some(m) = &self.baseline_model {
            if let Err(e) = m.validate() {
                p.push(format!("baseline_model: {e}"));
            }
        }
        for (name, t) in [
            ("train_segment", &self.train_segment),
            ("train_session", &self.train_session),
            ("train_baseline", &self.train_baseline),
        ] {
            p.extend(t.problems().into_iter().map(|e| format!("{name}: {e}")));
        }
        let e = &self.evaluation;
        if !(e.vote_fraction > 0.0 && e.vote_fraction <= 1.0) {
            p.push(format!("evaluation.vote_fraction: {} outside (0, 1]", e.vote_fraction));
        }
        if e.bucket_edges.is_empty() || e.bucket_edges.windows(2).any(|w| w[0] >= w[1]) || e.bucket_edges[0] == 0 {
            p.push("evaluation.bucket_edges: must be positive and strictly increasing".into());
        }
        let g = &self.gridsearch;
        if [g.parallel_filters.len(), g.c6_filters.len(), g.c6_kernel.len(), g.d2_units.len(), g.dropout.len()].contains(&0) {
            p.push("gridsearch: every axis needs at least one value".into());
        }
        p
    }
}

/// Parses and checks a config file. Unreadable files are an error; every
/// other problem is listed in the returned report.
pub fn validate_config(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match PipelineConfig::from_toml(&text) {
        Ok(cfg) => Ok(cfg.problems()),
        Err(Error::Config(p)) => Ok(p),
        Err(e) => Err(e),
    }
}

/// One session of the working set, as stored in `features/sessions.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub session_id: String,
    pub speaker_id: String,
    pub split: Split,
    pub class: SeverityClass,
    pub hamd: Option<u32>,
    pub qids: Option<u32>,
    pub duration_s: f64,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub session_id: String,
    pub split: Split,
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub class: SeverityClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub source: FeatureSource,
    pub channels: usize,
    pub frame_rate_hz: f64,
    pub sessions: usize,
    pub segments: usize,
    pub dropped_sessions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPredictionRow {
    pub session_id: String,
    pub split: Split,
    pub index: usize,
    pub truth: SeverityClass,
    pub predicted: SeverityClass,
    pub confidence: f64,
    pub p_normal: f64,
    pub p_moderate: f64,
    pub p_severe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub stage: String,
    pub candidate: String,
    pub parameters: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_loss: f64,
    pub val_uar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub check: String,
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub passed: bool,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Format(format!("cannot read {}: {e}", path.display())),
        _ => Error::Csv(e),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Summary of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<MetricsRow>,
}

impl Evaluation {
    pub fn row(&self, model: &str, level: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.model == model && r.level == level)
    }
}

/// Stage runner bound to one config and work directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub workers: usize,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, workers: Option<usize>) -> Self {
        let workers = workers
            .filter(|&w| w > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Self { config, workers }
    }

    pub fn work_dir(&self) -> &Path {
        &self.config.paths.work_dir
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.work_dir().join(name);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    pub fn features_dir(&self) -> Result<PathBuf> {
        self.dir("features")
    }

    pub fn acf_dir(&self) -> Result<PathBuf> {
        self.dir("acf")
    }

    pub fn checkpoints_dir(&self) -> Result<PathBuf> {
        self.dir("checkpoints")
    }

    pub fn reports_dir(&self) -> Result<PathBuf> {
        self.dir("reports")
    }

    fn pool<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Argument(format!("worker pool: {e}")))?;
        Ok(pool.install(f))
    }

    fn validate(&self) -> Result<()> {
        let p = self.config.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Writes the synthetic corpus to `out` (default `<work>/corpus`).
    pub fn synth(&self, spec: &SynthSpec, out: Option<&Path>) -> Result<PathBuf> {
        let dir = out.map_or_else(|| self.work_dir().join("corpus"), Path::to_path_buf);
        self.pool(|| generate_corpus(spec, &dir))??;
        Ok(dir.join("manifest.csv"))
    }

    fn load_series(&self, path: &Path) -> Result<ChannelSeries> {
        let f = &self.config.features;
        let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        let mut cs = if is_wav {
            mfcc_with(&normalize_peak(load_wav(path)?), &f.mfcc)?
        } else {
            ingest_feature_csv(path, f.expected_channels)?
        };
        if let Some(src) = f.source {
            cs.source = src;
        }
        Ok(cs)
    }

    /// Reads the manifest, assigns splits, then writes standardized segment
    /// features for every session.
    pub fn features(&self) -> Result<FeatureSummary> {
        self.validate()?;
        let manifest = self.config.manifest_path();
        let rows = read_manifest(&manifest)?;
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let sessions = sessions_from_manifest(&rows, self.config.split.ratios, self.config.split.seed)?;
        let dir = self.features_dir()?;
        let rule = self.config.features.segmentation;
        let results = self.pool(|| {
            sessions
                .par_iter()
                .map(|s| -> Result<_> {
                    let split = s.split.expect("splits assigned");
                    let series = self.load_series(&base.join(&s.path))?;
                    let bounds = rule.segment(series.duration_s(), split)?;
                    if bounds.is_empty() {
                        return Ok(None);
                    }
                    let mut c = Container::new(json!({
                        "content": "features",
                        "session_id": s.session_id,
                        "frame_rate_hz": series.frame_rate_hz,
                        "source": series.source,
                        "channel_names": series.channel_names,
                        "bounds": bounds,
                    }));
                    for (k, &(a, b)) in bounds.iter().enumerate() {
                        let seg = standardize_channels(&slice_segment(&series, a, b)?)?;
                        c.push(NamedArray::new(
                            format!("seg/{k}"),
                            vec![seg.channels(), seg.frames()],
                            seg.data.concat(),
                        )?);
                    }
                    c.save(&dir.join(format!("{}.bin", s.session_id)))?;
                    Ok(Some((series.source, series.channels(), series.frame_rate_hz, bounds)))
                })
                .collect::<Result<Vec<_>>>()
        })??;

        let mut table = Vec::new();
        let mut segments = Vec::new();
        let mut dropped = Vec::new();
        let mut kind: Option<(FeatureSource, usize, f64)> = None;
        for (s, r) in sessions.iter().zip(results) {
            let Some((source, channels, rate, bounds)) = r else {
                info!("session {} yields no segment; dropped", s.session_id);
                dropped.push(s.session_id.clone());
                continue;
            };
            match kind {
                None => kind = Some((source, channels, rate)),
                Some(k) if k != (source, channels, rate) => bail!(
                    Format,
                    "session {} has {} {} channels at {} Hz, others {} {} at {} Hz",
                    s.session_id,
                    channels,
                    source,
                    rate,
                    k.1,
                    k.0,
                    k.2
                ),
                _ => {}
            }
            let split = s.split.expect("splits assigned");
            segments.extend(bounds.iter().enumerate().map(|(index, &(start_s, end_s))| SegmentRow {
                session_id: s.session_id.clone(),
                split,
                index,
                start_s,
                end_s,
                class: s.class,
            }));
            table.push(SessionRow {
                session_id: s.session_id.clone(),
                speaker_id: s.speaker_id.clone(),
                split,
                class: s.class,
                hamd: s.score(crate::corpus::Scale::Hamd),
                qids: s.score(crate::corpus::Scale::Qids),
                duration_s: s.duration_s,
                segments: bounds.len(),
            });
        }
        let Some((source, channels, frame_rate_hz)) = kind else {
            bail!(Argument, "no session in {} yields a segment", manifest.display());
        };
        let frames_min = (rule.min_s * frame_rate_hz).floor() as usize;
        if self.config.acf.max_delay >= frames_min {
            bail!(Argument, "max delay {} is not below the shortest segment ({} frames)", self.config.acf.max_delay, frames_min);
        }
        write_csv(&dir.join("sessions.csv"), &table)?;
        write_csv(&dir.join("segments.csv"), &segments)?;
        let summary = FeatureSummary {
            source,
            channels,
            frame_rate_hz,
            sessions: table.len(),
            segments: segments.len(),
            dropped_sessions: dropped,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        info!("features: {} sessions, {} segments, {} dropped", summary.sessions, summary.segments, summary.dropped_sessions.len());
        Ok(summary)
    }

    pub fn sessions(&self) -> Result<Vec<SessionRow>> {
        let path = self.work_dir().join("features").join("sessions.csv");
        if !path.is_file() {
            bail!(Argument, "{} is missing; run the features stage first", path.display());
        }
        read_csv(&path)
    }

    pub fn summary(&self) -> Result<FeatureSummary> {
        read_json(&self.work_dir().join("features").join("summary.json"))
    }

    /// Standardized segment features of one session, `[channels][frames]` each.
    pub fn load_segment_features(&self, session_id: &str) -> Result<Vec<Vec<Vec<f64>>>> {
        let c = Container::load(&self.work_dir().join("features").join(format!("{session_id}.bin")))?;
        c.arrays
            .iter()
            .filter(|a| a.name.starts_with("seg/"))
            .map(|a| {
                let frames = a.shape[1];
                Ok(a.data.chunks(frames.max(1)).map(<[f64]>::to_vec).collect())
            })
            .collect()
    }

    /// Computes every segment ACF and fits the standardizer on the training split.
    pub fn acf(&self) -> Result<AcfStandardizer> {
        self.validate()?;
        if !self.work_dir().join("features").join("sessions.csv").is_file() {
            self.features()?;
        }
        let table = self.sessions()?;
        let summary = self.summary()?;
        let dir = self.acf_dir()?;
        let d = self.config.acf.max_delay;
        let names = crate::dsp::default_channel_names(summary.channels);
        let train = self.pool(|| {
            table
                .par_iter()
                .map(|s| -> Result<Vec<AcfMatrix>> {
                    let mut c = Container::new(json!({
                        "content": "acf",
                        "session_id": s.session_id,
                        "channels": summary.channels,
                        "max_delay": d,
                        "frame_rate_hz": summary.frame_rate_hz,
                        "source": summary.source,
                    }));
                    let mut mats = Vec::new();
                    for (k, seg) in self.load_segment_features(&s.session_id)?.into_iter().enumerate() {
                        let cs = ChannelSeries::new(seg, summary.frame_rate_hz, names.clone(), summary.source)?;
                        let m = acf_matrix(&cs, d)?;
                        c.push(NamedArray::new(format!("acf/{k}"), vec![m.rows(), m.cols()], m.values.clone())?);
                        mats.push(m);
                    }
                    c.save(&dir.join(format!("{}.bin", s.session_id)))?;
                    Ok(if s.split == Split::Train { mats } else { Vec::new() })
                })
                .collect::<Result<Vec<_>>>()
        })??;
        let train: Vec<AcfMatrix> = train.into_iter().flatten().collect();
        let st = fit_acf_standardizer(&train)?;
        save_standardizer(&dir.join("standardizer.bin"), &st)?;
        info!("acf: standardizer fitted on {} training matrices", st.fitted_on);
        Ok(st)
    }

    pub fn load_session_acfs(&self, session_id: &str) -> Result<Vec<AcfMatrix>> {
        let path = self.work_dir().join("acf").join(format!("{session_id}.bin"));
        let c = Container::load(&path)?;
        let meta = &c.metadata;
        let channels: usize = serde_json::from_value(meta["channels"].clone())?;
        let max_delay: usize = serde_json::from_value(meta["max_delay"].clone())?;
        let frame_rate_hz: f64 = serde_json::from_value(meta["frame_rate_hz"].clone())?;
        let source: FeatureSource = serde_json::from_value(meta["source"].clone())?;
        Ok(c.arrays
            .into_iter()
            .filter(|a| a.name.starts_with("acf/"))
            .map(|a| AcfMatrix {
                values: a.data,
                channels,
                max_delay,
                frame_rate_hz,
                source,
            })
            .collect())
    }

    fn standardized_inputs(&self, table: &[SessionRow], split: Split, st: &AcfStandardizer) -> Result<Vec<LabeledInput>> {
        let mut out = Vec::new();
        for s in table.iter().filter(|s| s.split == split) {
            for m in self.load_session_acfs(&s.session_id)? {
                out.push(LabeledInput {
                    values: apply_acf_standardizer(st, &m)?.values,
                    class: s.class,
                });
            }
        }
        Ok(out)
    }

    fn segment_model_config(&self, summary: &FeatureSummary) -> DilatedCnnConfig {
        self.config.segment_model.clone().unwrap_or_else(|| {
            DilatedCnnConfig::for_source(summary.source, summary.channels, self.config.acf.max_delay)
        })
    }

    fn checkpoint_info(&self, summary: &FeatureSummary) -> serde_json::Value {
        json!({
            "source": summary.source,
            "channels": summary.channels,
            "frame_rate_hz": summary.frame_rate_hz,
            "max_delay": self.config.acf.max_delay,
        })
    }

    /// Trains the dilated CNN on train/validation ACFs. Test-split files are never opened.
    pub fn train_segment(&self) -> Result<Checkpoint> {
        self.validate()?;
        let table = self.sessions()?;
        let summary = self.summary()?;
        let st = load_standardizer(&self.work_dir().join("acf").join("standardizer.bin"))?;
        let train = self.standardized_inputs(&table, Split::Train, &st)?;
        let val = self.standardized_inputs(&table, Split::Validation, &st)?;
        let mc = self.segment_model_config(&summary);
        let tc = &self.config.train_segment;
        let mut ck = match tc.precision {
            Precision::Single => fit_dilated::<f32>(&mc, &train, &val, tc)?,
            Precision::Double => fit_dilated::<f64>(&mc, &train, &val, tc)?,
        };
        ck.standardizer = Some(st);
        ck.info = self.checkpoint_info(&summary);
        save_checkpoint(&self.checkpoints_dir()?.join("segment.ckpt"), &ck)?;
        ck.history.as_ref().expect("set by training").write_csv(&self.reports_dir()?.join("segment_history.csv"))?;
        Ok(ck)
    }

    /// Exports D1 embeddings for every session and segment-level predictions.
    pub fn embed(&self) -> Result<Vec<SegmentPredictionRow>> {
        let table = self.sessions()?;
        let ck = load_checkpoint(&self.work_dir().join("checkpoints").join("segment.ckpt"))?;
        let Some(st) = ck.standardizer.clone() else {
            bail!(Format, "segment checkpoint carries no ACF standardizer");
        };
        let (embeddings, rows) = match ck.precision {
            Precision::Single => embed_with(&ck.dilated_cnn::<f32>()?, &st, &table, self)?,
            Precision::Double => embed_with(&ck.dilated_cnn::<f64>()?, &st, &table, self)?,
        };
        save_embeddings(&self.checkpoints_dir()?.join("embeddings.bin"), &embeddings)?;
        write_csv(&self.reports_dir()?.join("segment_predictions.csv"), &rows)?;
        Ok(rows)
    }

    fn sequences(&self, table: &[SessionRow], split: Split, embeddings: &[SessionEmbeddings]) -> Result<Vec<SessionSequence>> {
        let by_id: std::collections::BTreeMap<&str, &SessionEmbeddings> =
            embeddings.iter().map(|e| (e.session_id.as_str(), e)).collect();
        table
            .iter()
            .filter(|s| s.split == split)
            .map(|s| {
                let e = by_id
                    .get(s.session_id.as_str())
                    .ok_or_else(|| Error::Format(format!("no embeddings for session {}", s.session_id)))?;
                Ok(SessionSequence {
                    session_id: s.session_id.clone(),
                    embeddings: e.embeddings.clone(),
                    class: s.class,
                })
            })
            .collect()
    }

    fn session_model_config(&self, summary: &FeatureSummary, width: usize) -> SessionLstmConfig {
        self.config
            .session_model
            .clone()
            .unwrap_or_else(|| SessionLstmConfig::for_source(summary.source, width))
    }

    /// Trains the session LSTM on train/validation embedding sequences.
    pub fn train_session(&self) -> Result<Checkpoint> {
        self.validate()?;
        let table = self.sessions()?;
        let summary = self.summary()?;
        let embeddings = load_embeddings(&self.work_dir().join("checkpoints").join("embeddings.bin"))?;
        let train = self.sequences(&table, Split::Train, &embeddings)?;
        let val = self.sequences(&table, Split::Validation, &embeddings)?;
        let width = train.first().and_then(|s| s.embeddings.first()).map_or(0, Vec::len);
        let mc = self.session_model_config(&summary, width);
        let tc = &self.config.train_session;
        let mut ck = match tc.precision {
            Precision::Single => fit_lstm::<f32>(&mc, &train, &val, tc)?,
            Precision::Double => fit_lstm::<f64>(&mc, &train, &val, tc)?,
        };
        ck.info = self.checkpoint_info(&summary);
        save_checkpoint(&self.checkpoints_dir()?.join("session.ckpt"), &ck)?;
        ck.history.as_ref().expect("set by training").write_csv(&self.reports_dir()?.join("session_history.csv"))?;
        Ok(ck)
    }

    fn baseline_config(&self, summary: &FeatureSummary) -> BaselineCnnConfig {
        self.config.baseline_model.clone().unwrap_or_else(|| BaselineCnnConfig {
            input_channels: summary.channels,
            ..BaselineCnnConfig::default()
        })
    }

    /// First `frames` frames of every segment of a split, channel-major,
    /// zero-padded when a segment is shorter.
    fn baseline_inputs(&self, table: &[SessionRow], split: Split, frames: usize) -> Result<Vec<(String, LabeledInput)>> {
        let mut out = Vec::new();
        for s in table.iter().filter(|s| s.split == split) {
            for seg in self.load_segment_features(&s.session_id)? {
                let values = seg
                    .iter()
                    .flat_map(|c| c.iter().copied().chain(std::iter::repeat(0.0)).take(frames))
                    .collect();
                out.push((s.session_id.clone(), LabeledInput { values, class: s.class }));
            }
        }
        Ok(out)
    }

    /// Trains the two-layer baseline CNN on truncated segment features and
    /// writes its test-split segment predictions.
    pub fn train_baseline(&self) -> Result<Checkpoint> {
        self.validate()?;
        let table = self.sessions()?;
        let summary = self.summary()?;
        let mc = self.baseline_config(&summary);
        let strip = |v: Vec<(String, LabeledInput)>| v.into_iter().map(|(_, x)| x).collect::<Vec<_>>();
        let train = strip(self.baseline_inputs(&table, Split::Train, mc.input_frames)?);
        let val = strip(self.baseline_inputs(&table, Split::Validation, mc.input_frames)?);
        let tc = &self.config.train_baseline;
        let (mut ck, preds) = match tc.precision {
            Precision::Single => self.fit_baseline::<f32>(&mc, &train, &val, &table)?,
            Precision::Double => self.fit_baseline::<f64>(&mc, &train, &val, &table)?,
        };
        ck.info = self.checkpoint_info(&summary);
        save_checkpoint(&self.checkpoints_dir()?.join("baseline.ckpt"), &ck)?;
        ck.history.as_ref().expect("set by training").write_csv(&self.reports_dir()?.join("baseline_history.csv"))?;
        write_csv(&self.reports_dir()?.join("baseline_segment_predictions.csv"), &preds)?;
        Ok(ck)
    }

    fn fit_baseline<T: Real>(
        &self,
        mc: &BaselineCnnConfig,
        train: &[LabeledInput],
        val: &[LabeledInput],
        table: &[SessionRow],
    ) -> Result<(Checkpoint, Vec<SegmentPredictionRow>)> {
        let tc = &self.config.train_baseline;
        let mut model = build_baseline_cnn::<T>(mc, tc.seed)?;
        let out = train_segment_model(&mut model, train, val, tc)?;
        let mut ck = Checkpoint::new(ModelKind::BaselineCnn, mc, &model.store, tc.seed)?;
        ck.adam = Some(AdamSnapshot::capture(&model.store, &out.adam));
        ck.history = Some(out.history);
        let test = self.baseline_inputs(table, Split::Test, mc.input_frames)?;
        let samples: Vec<&[f64]> = test.iter().map(|(_, x)| x.values.as_slice()).collect();
        let preds = predict_segments(&model, &samples, 128)?;
        let mut rows = Vec::with_capacity(preds.len());
        let mut index = 0;
        for (k, ((sid, x), p)) in test.iter().zip(preds).enumerate() {
            if k > 0 && test[k - 1].0 != *sid {
                index = 0;
            }
            rows.push(prediction_row(sid, Split::Test, index, x.class, &p.probabilities));
            index += 1;
        }
        Ok((ck, rows))
    }

    fn read_segment_predictions(&self) -> Result<Vec<SegmentPredictionRow>> {
        let path = self.work_dir().join("reports").join("segment_predictions.csv");
        if !path.is_file() {
            bail!(Argument, "{} is missing; run the embed stage first", path.display());
        }
        read_csv(&path)
    }

    /// Plurality vote over the most confident test segments of each session.
    pub fn vote(&self) -> Result<Vec<Prediction>> {
        let table = self.sessions()?;
        let rows = self.read_segment_predictions()?;
        let preds = vote_predictions(&table, &rows, self.config.evaluation.vote_fraction, self.config.evaluation.seed)?;
        write_csv(&self.reports_dir()?.join("vote_predictions.csv"), &preds)?;
        Ok(preds)
    }

    /// Session-level LSTM predictions for the test split.
    pub fn session_predictions(&self) -> Result<Vec<Prediction>> {
        let table = self.sessions()?;
        let ck = load_checkpoint(&self.work_dir().join("checkpoints").join("session.ckpt"))?;
        let embeddings = load_embeddings(&self.work_dir().join("checkpoints").join("embeddings.bin"))?;
        let test = self.sequences(&table, Split::Test, &embeddings)?;
        if test.is_empty() {
            bail!(Argument, "test split is empty");
        }
        let (logits, _) = match ck.precision {
            Precision::Single => session_logits(&ck.session_lstm::<f32>()?, &test, 128)?,
            Precision::Double => session_logits(&ck.session_lstm::<f64>()?, &test, 128)?,
        };
        Ok(test
            .iter()
            .zip(logits)
            .map(|(s, z)| {
                let p = softmax_f64(&z);
                let (best, conf) = argmax(&p);
                Prediction {
                    id: s.session_id.clone(),
                    truth: s.class,
                    predicted: SeverityClass::ALL[best],
                    confidence: conf,
                }
            })
            .collect())
    }

    /// Metrics, confusion matrices, bucket report and misclassification list
    /// for every model with predictions on disk.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let table = self.sessions()?;
        let summary = self.summary()?;
        let features = summary.source.as_str();
        let reports = self.reports_dir()?;
        let mut rows = Vec::new();

        let seg_rows: Vec<SegmentPredictionRow> =
            self.read_segment_predictions()?.into_iter().filter(|r| r.split == Split::Test).collect();
        let seg_preds: Vec<Prediction> = seg_rows.iter().map(segment_prediction).collect();
        report_model(&reports, "dilated_cnn", "segment", features, &seg_preds, &mut rows)?;

        let votes = vote_predictions(&table, &seg_rows, self.config.evaluation.vote_fraction, self.config.evaluation.seed)?;
        write_csv(&reports.join("vote_predictions.csv"), &votes)?;
        report_model(&reports, "plurality_vote", "session", features, &votes, &mut rows)?;

        let sessions = self.session_predictions()?;
        write_csv(&reports.join("session_predictions.csv"), &sessions)?;
        report_model(&reports, "cnn_lstm", "session", features, &sessions, &mut rows)?;

        let baseline_path = reports.join("baseline_segment_predictions.csv");
        if baseline_path.is_file() {
            let b: Vec<SegmentPredictionRow> = read_csv(&baseline_path)?;
            let preds: Vec<Prediction> = b.iter().map(segment_prediction).collect();
            report_model(&reports, "baseline_cnn", "segment", features, &preds, &mut rows)?;
        }
        write_csv(&reports.join("metrics.csv"), &rows)?;

        let counts: std::collections::BTreeMap<&str, usize> =
            table.iter().map(|s| (s.session_id.as_str(), s.segments)).collect();
        let seg_counts: Vec<usize> = sessions.iter().map(|p| counts[p.id.as_str()]).collect();
        let buckets = accuracy_by_segment_count(&sessions, &seg_counts, &self.config.evaluation.bucket_edges)?;
        write_csv(&reports.join("accuracy_by_segment_count.csv"), &buckets)?;
        write_text(&reports.join("accuracy_by_segment_count.svg"), &buckets_svg(&buckets, "Session accuracy by segment count"))?;

        let records: Vec<crate::corpus::SessionRecord> = table.iter().map(session_record).collect();
        write_csv(&reports.join("misclassified_sessions.csv"), &misclassification_report(&sessions, &records)?)?;

        let mut chance = Vec::new();
        for (level, truths) in [
            ("segment", seg_preds.iter().map(|p| p.truth).collect::<Vec<_>>()),
            ("session", sessions.iter().map(|p| p.truth).collect()),
        ] {
            let n = crate::training::class_counts(truths);
            let f1 = chance_f1(n)?;
            chance.push(json!({"level": level, "f1_n": f1[0], "f1_m": f1[1], "f1_s": f1[2]}));
        }
        write_json(&reports.join("chance_f1.json"), &chance)?;
        for r in &rows {
            info!("{} {} {}: accuracy {:.4} UAR {:.4}", r.model, r.level, r.features, r.accuracy, r.uar);
        }
        Ok(Evaluation { rows })
    }

    /// Runs `features` through `evaluate`.
    pub fn run_all(&self) -> Result<Evaluation> {
        self.acf()?;
        self.train_segment()?;
        self.embed()?;
        self.train_session()?;
        self.vote()?;
        self.evaluate()
    }

    /// Trains every candidate of the configured grid and reports validation
    /// loss and UAR at the best epoch.
    pub fn gridsearch(&self, stage: GridStage) -> Result<Vec<GridRow>> {
        self.validate()?;
        let table = self.sessions()?;
        let summary = self.summary()?;
        let g = &self.config.gridsearch;
        let mut rows = Vec::new();
        match stage {
            GridStage::Segment => {
                let st = load_standardizer(&self.work_dir().join("acf").join("standardizer.bin"))?;
                let train = self.standardized_inputs(&table, Split::Train, &st)?;
                let val = self.standardized_inputs(&table, Split::Validation, &st)?;
                let mut tc = self.config.train_segment.clone();
                if let Some(e) = g.max_epochs {
                    tc.max_epochs = e;
                    tc.patience = tc.patience.min(e.saturating_sub(1));
                }
                let base = self.segment_model_config(&summary);
                for &o1 in &g.parallel_filters {
                    for &o2 in &g.c6_filters {
                        for &k1 in &g.c6_kernel {
                            for &o3 in &g.d2_units {
                                for &dp in &g.dropout {
                                    let mc = DilatedCnnConfig {
                                        parallel_filters: o1,
                                        c6_filters: o2,
                                        c6_kernel: k1,
                                        d2_units: o3,
                                        dropout: dp,
                                        ..base.clone()
                                    };
                                    let ck = match tc.precision {
                                        Precision::Single => fit_dilated::<f32>(&mc, &train, &val, &tc)?,
                                        Precision::Double => fit_dilated::<f64>(&mc, &train, &val, &tc)?,
                                    };
                                    let name = format!("O1={o1} O2={o2} K1={k1} O3={o3} DP={dp}");
                                    rows.push(grid_row("segment", name, mc.parameter_count()?, &ck));
                                }
                            }
                        }
                    }
                }
            }
            GridStage::Session => {
                let embeddings = load_embeddings(&self.work_dir().join("checkpoints").join("embeddings.bin"))?;
                let train = self.sequences(&table, Split::Train, &embeddings)?;
                let val = self.sequences(&table, Split::Validation, &embeddings)?;
                let width = train.first().and_then(|s| s.embeddings.first()).map_or(0, Vec::len);
                let mut tc = self.config.train_session.clone();
                if let Some(e) = g.max_epochs {
                    tc.max_epochs = e;
                    tc.patience = tc.patience.min(e.saturating_sub(1));
                }
                for candidate in &g.session_models {
                    let mc = SessionLstmConfig {
                        input_size: width,
                        ..candidate.clone()
                    };
                    let ck = match tc.precision {
                        Precision::Single => fit_lstm::<f32>(&mc, &train, &val, &tc)?,
                        Precision::Double => fit_lstm::<f64>(&mc, &train, &val, &tc)?,
                    };
                    let name = format!(
                        "L1={} L2={} DP1={} DP2={} O4={}",
                        mc.lstm1_units, mc.lstm2_units, mc.recurrent_dropout1, mc.recurrent_dropout2, mc.d3_units
                    );
                    rows.push(grid_row("session", name, mc.parameter_count(), &ck));
                }
            }
        }
        let file = format!("gridsearch_{}.csv", stage.as_str());
        write_csv(&self.reports_dir()?.join(file), &rows)?;
        if let Some(best) = rows.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)) {
            info!("lowest validation loss: {} ({:.5})", best.candidate, best.val_loss);
        }
        if let Some(best) = rows.iter().max_by(|a, b| a.val_uar.total_cmp(&b.val_uar)) {
            info!("highest validation UAR: {} ({:.4})", best.candidate, best.val_uar);
        }
        Ok(rows)
    }

    /// Runs the gradient-check suite and writes `reports/gradcheck.csv`.
    pub fn gradcheck(&self, seed: u64) -> Result<Vec<GradCheckRow>> {
        let rows: Vec<GradCheckRow> = gradient_check_suite(seed)?
            .into_iter()
            .map(|c| GradCheckRow {
                passed: c.passed(),
                max_relative_error: c.report.max_error(),
                tolerance: c.report.tolerance,
                check: c.name,
            })
            .collect();
        write_csv(&self.reports_dir()?.join("gradcheck.csv"), &rows)?;
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridStage {
    Segment,
    Session,
}

impl GridStage {
    pub fn as_str(self) -> &'static str {
        match self {
            GridStage::Segment => "segment",
            GridStage::Session => "session",
        }
    }
}

fn grid_row(stage: &str, candidate: String, parameters: usize, ck: &Checkpoint) -> GridRow {
    let h = ck.history.as_ref().expect("set by training");
    let best = h.best().copied().unwrap_or(crate::training::EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        val_loss: f64::NAN,
        val_uar: f64::NAN,
        learning_rate: f64::NAN,
    });
    GridRow {
        stage: stage.into(),
        candidate,
        parameters,
        best_epoch: h.best_epoch,
        epochs_run: h.epochs.len(),
        val_loss: best.val_loss,
        val_uar: best.val_uar,
    }
}

fn fit_dilated<T: Real>(
    mc: &DilatedCnnConfig,
    train: &[LabeledInput],
    val: &[LabeledInput],
    tc: &TrainConfig,
) -> Result<Checkpoint> {
    let mut model = build_dilated_cnn::<T>(mc, tc.seed)?;
    let out = train_segment_model(&mut model, train, val, tc)?;
    let mut ck = Checkpoint::new(ModelKind::DilatedCnn, mc, &model.store, tc.seed)?;
    ck.adam = Some(AdamSnapshot::capture(&model.store, &out.adam));
    ck.history = Some(out.history);
    Ok(ck)
}

fn fit_lstm<T: Real>(
    mc: &SessionLstmConfig,
    train: &[SessionSequence],
    val: &[SessionSequence],
    tc: &TrainConfig,
) -> Result<Checkpoint> {
    let mut model = build_session_lstm::<T>(mc, tc.seed)?;
    let out = train_session_model(&mut model, train, val, tc)?;
    let mut ck = Checkpoint::new(ModelKind::SessionLstm, mc, &model.store, tc.seed)?;
    ck.adam = Some(AdamSnapshot::capture(&model.store, &out.adam));
    ck.history = Some(out.history);
    Ok(ck)
}

fn embed_with<T: Real, M: SegmentModel<T>>(
    model: &M,
    st: &AcfStandardizer,
    table: &[SessionRow],
    p: &Pipeline,
) -> Result<(Vec<SessionEmbeddings>, Vec<SegmentPredictionRow>)> {
    let mut embeddings = Vec::with_capacity(table.len());
    let mut rows = Vec::new();
    for s in table {
        let mats = p.load_session_acfs(&s.session_id)?;
        if mats.is_empty() {
            warn!("session {} has no segments; skipped", s.session_id);
            continue;
        }
        let inputs = mats
            .iter()
            .map(|m| apply_acf_standardizer(st, m).map(|x| x.values))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let preds = predict_segments(model, &refs, 128)?;
        for (k, pr) in preds.iter().enumerate() {
            rows.push(prediction_row(&s.session_id, s.split, k, s.class, &pr.probabilities));
        }
        embeddings.push(SessionEmbeddings {
            session_id: s.session_id.clone(),
            embeddings: preds.into_iter().map(|p| p.embedding).collect(),
        });
    }
    Ok((embeddings, rows))
}

fn prediction_row(session_id: &str, split: Split, index: usize, truth: SeverityClass, p: &[f64; 3]) -> SegmentPredictionRow {
    let (best, confidence) = argmax(p);
    SegmentPredictionRow {
        session_id: session_id.to_string(),
        split,
        index,
        truth,
        predicted: SeverityClass::ALL[best],
        confidence,
        p_normal: p[0],
        p_moderate: p[1],
        p_severe: p[2],
    }
}

fn segment_prediction(r: &SegmentPredictionRow) -> Prediction {
    Prediction {
        id: format!("{}#{}", r.session_id, r.index),
        truth: r.truth,
        predicted: r.predicted,
        confidence: r.confidence,
    }
}

fn argmax(p: &[f64]) -> (usize, f64) {
    p.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc })
}

fn softmax_f64(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn session_record(s: &SessionRow) -> crate::corpus::SessionRecord {
    use crate::corpus::ScaleScore;
    let scores = s.hamd.map(ScaleScore::hamd).into_iter().chain(s.qids.map(ScaleScore::qids)).collect();
    crate::corpus::SessionRecord {
        session_id: s.session_id.clone(),
        speaker_id: s.speaker_id.clone(),
        scores,
        class: s.class,
        split: Some(s.split),
        path: String::new(),
        duration_s: s.duration_s,
    }
}

/// Voted test-session labels; the vote's confidence is the share of kept
/// segments agreeing with the outcome.
pub fn vote_predictions(
    table: &[SessionRow],
    rows: &[SegmentPredictionRow],
    fraction: f64,
    seed: u64,
) -> Result<Vec<Prediction>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in table.iter().filter(|s| s.split == Split::Test) {
        let mut segs: Vec<&SegmentPredictionRow> = rows.iter().filter(|r| r.session_id == s.session_id).collect();
        if segs.is_empty() {
            warn!("no segment predictions for test session {}", s.session_id);
            continue;
        }
        segs.sort_by_key(|r| r.index);
        let pairs: Vec<(SeverityClass, f64)> = segs.iter().map(|r| (r.predicted, r.confidence)).collect();
        let label = plurality_vote(&pairs, fraction, &mut rng)?;
        let keep = ((fraction * pairs.len() as f64 - 1e-9).ceil() as usize).clamp(1, pairs.len());
        let mut confs: Vec<&(SeverityClass, f64)> = pairs.iter().collect();
        confs.sort_by(|a, b| b.1.total_cmp(&a.1));
        let agree = confs[..keep].iter().filter(|p| p.0 == label).count();
        out.push(Prediction {
            id: s.session_id.clone(),
            truth: s.class,
            predicted: label,
            confidence: agree as f64 / keep as f64,
        });
    }
    Ok(out)
}

fn report_model(
    dir: &Path,
    model: &str,
    level: &str,
    features: &str,
    preds: &[Prediction],
    rows: &mut Vec<MetricsRow>,
) -> Result<()> {
    if preds.is_empty() {
        warn!("{model}: no test predictions; skipped");
        return Ok(());
    }
    let cm = confusion(preds);
    let m = metrics(&cm)?;
    let stem = format!("confusion_{model}_{level}");
    write_confusion_csv(&dir.join(format!("{stem}.csv")), &cm)?;
    write_text(&dir.join(format!("{stem}.svg")), &confusion_svg(&cm, &format!("{model} ({level}, {features})")))?;
    rows.push(MetricsRow::new(model, level, features, &m));
    Ok(())
}

pub fn save_standardizer(path: &Path, st: &AcfStandardizer) -> Result<()> {
    let mut c = Container::new(json!({"content": "acf_standardizer", "rows": st.rows, "cols": st.cols, "fitted_on": st.fitted_on}));
    c.push(NamedArray::new("mean", vec![st.rows, st.cols], st.mean.clone())?);
    c.push(NamedArray::new("std", vec![st.rows, st.cols], st.std.clone())?);
    c.save(path)
}

pub fn load_standardizer(path: &Path) -> Result<AcfStandardizer> {
    if !path.is_file() {
        bail!(Argument, "{} is missing; run the acf stage first", path.display());
    }
    let c = Container::load(path)?;
    if c.metadata["content"] != "acf_standardizer" {
        bail!(Format, "{} does not hold an ACF standardizer", path.display());
    }
    Ok(AcfStandardizer {
        mean: c.array("mean")?.data.clone(),
        std: c.array("std")?.data.clone(),
        rows: serde_json::from_value(c.metadata["rows"].clone())?,
        cols: serde_json::from_value(c.metadata["cols"].clone())?,
        fitted_on: serde_json::from_value(c.metadata["fitted_on"].clone())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = PipelineConfig::default();
        assert!(cfg.problems().is_empty(), "{:?}", cfg.problems());
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), cfg);
        assert_eq!(cfg.manifest_path(), PathBuf::from("work/corpus/manifest.csv"));
    }

    #[test]
    fn delay_must_stay_below_shortest_segment() {
        let mut cfg = PipelineConfig::default();
        cfg.features.segmentation = SegmentationRule {
            window_s: 3.0,
            shift_s: 1.0,
            min_s: 3.0,
        };
        assert!(cfg.problems().is_empty());
        cfg.acf.max_delay = 299;
        assert!(cfg.problems().is_empty());
        cfg.acf.max_delay = 300;
        let p = cfg.problems();
        assert_eq!(p.len(), 1);
        assert!(p[0].starts_with("acf.max_delay"));
    }

    #[test]
    fn every_violation_is_listed() {
        let cfg = PipelineConfig::from_toml(
            "[paths]\nmanifest = \"/no/such/manifest.csv\"\n[split]\nratios = [0.7, 0.2, 0.2]\n\
             [evaluation]\nvote_fraction = 0.0\n[segment_model]\ninput_delay_bins = 31\n",
        )
        .unwrap();
        let p = cfg.problems();
        for key in ["paths.manifest", "split.ratios", "evaluation.vote_fraction", "segment_model.input_delay_bins"] {
            assert!(p.iter().any(|x| x.starts_with(key)), "{key} not in {p:?}");
        }
        assert!(matches!(PipelineConfig::from_toml("[acf]\nmax_delay = \"x\""), Err(Error::Config(_))));
    }

    #[test]
    fn master_seed_reaches_every_component() {
        let cfg = PipelineConfig::from_toml("seed = 11").unwrap().with_seed(None);
        assert_eq!(
            [cfg.synth.seed, cfg.split.seed, cfg.train_segment.seed, cfg.train_session.seed, cfg.train_baseline.seed, cfg.evaluation.seed],
            [11; 6]
        );
        let cfg = cfg.with_seed(Some(3));
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.train_session.seed, 3);
        let untouched = PipelineConfig::default().with_seed(None);
        assert_eq!(untouched, PipelineConfig::default());
    }

    fn row(id: &str, index: usize, predicted: SeverityClass, confidence: f64) -> SegmentPredictionRow {
        SegmentPredictionRow {
            session_id: id.into(),
            split: Split::Test,
            index,
            truth: SeverityClass::Severe,
            predicted,
            confidence,
            p_normal: 0.0,
            p_moderate: 0.0,
            p_severe: 0.0,
        }
    }

    #[test]
    fn vote_keeps_the_most_confident_half() {
        let session = |id: &str, split| SessionRow {
            session_id: id.into(),
            speaker_id: "spk".into(),
            split,
            class: SeverityClass::Severe,
            hamd: Some(30),
            qids: None,
            duration_s: 40.0,
            segments: 4,
        };
        let table = vec![session("a", Split::Test), session("b", Split::Train)];
        let rows = vec![
            row("a", 0, SeverityClass::Normal, 0.4),
            row("a", 1, SeverityClass::Severe, 0.9),
            row("a", 2, SeverityClass::Normal, 0.5),
            row("a", 3, SeverityClass::Severe, 0.8),
            row("b", 0, SeverityClass::Normal, 0.99),
        ];
        let v = vote_predictions(&table, &rows, 0.5, 0).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].predicted, SeverityClass::Severe);
        assert_eq!(v[0].confidence, 1.0);
        // With every segment kept the vote ties 2:2 and the confidence is one half.
        let all = vote_predictions(&table, &rows, 1.0, 0).unwrap();
        assert_eq!(all[0].confidence, 0.5);
    }

    #[test]
    fn standardizer_file_round_trip() {
        let st = AcfStandardizer {
            mean: vec![0.5, -1.0, 0.25, 2.0],
            std: vec![1.0, 0.1, 1e-8, 3.0],
            rows: 1,
            cols: 4,
            fitted_on: 7,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        save_standardizer(&path, &st).unwrap();
        assert_eq!(load_standardizer(&path).unwrap(), st);
        assert!(matches!(load_standardizer(&dir.path().join("none.bin")), Err(Error::Argument(_))));
    }
}
