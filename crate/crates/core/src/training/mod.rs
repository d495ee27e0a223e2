//! Training loops, schedules, early stopping, class weighting and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, AdamSnapshot, Checkpoint, ModelKind};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acf::{apply_acf_standardizer, AcfMatrix, AcfStandardizer};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Mode, ParamStore, Real, Var};
use crate::container::{Container, NamedArray};
use crate::corpus::SeverityClass;
use crate::error::{bail, Error, Result};
use crate::evaluation::{metrics, ConfusionMatrix};
use crate::models::{
    apply_bn_updates, batch_input, predict_segments, BnUpdate, SegmentModel, SessionLstm, BN_MOMENTUM,
};

pub const SEGMENT_LEARNING_RATE: f64 = 2e-5;
pub const LSTM_INITIAL_RATE: f64 = 2e-4;
pub const LSTM_RATE_FLOOR: f64 = 2e-5;

/// Learning rate as a function of the 1-based epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { rate: f64 },
    /// `max(initial * factor^floor((epoch - 1) / every), floor)`.
    StepDecay { initial: f64, factor: f64, every: usize, floor: f64 },
}

impl LrSchedule {
    pub fn lstm() -> Self {
        LrSchedule::StepDecay {
            initial: LSTM_INITIAL_RATE,
            factor: 0.5,
            every: 10,
            floor: LSTM_RATE_FLOOR,
        }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant { rate } => rate,
            LrSchedule::StepDecay {
                initial,
                factor,
                every,
                floor,
            } => {
                let k = epoch.saturating_sub(1) / every.max(1);
                (initial * factor.powi(k.min(i32::MAX as usize) as i32)).max(floor)
            }
        }
    }

    fn validate(&self, problems: &mut Vec<String>) {
        match *self {
            LrSchedule::Constant { rate } => {
                if !(rate > 0.0 && rate.is_finite()) {
                    problems.push(format!("learning rate {rate} must be positive"));
                }
            }
            LrSchedule::StepDecay {
                initial,
                factor,
                every,
                floor,
            } => {
                if !(initial > 0.0 && initial.is_finite()) {
                    problems.push(format!("initial learning rate {initial} must be positive"));
                }
                if !(factor > 0.0 && factor <= 1.0) {
                    problems.push(format!("decay factor {factor} outside (0, 1]"));
                }
                if every == 0 {
                    problems.push("decay interval must be at least one epoch".into());
                }
                if !(floor >= 0.0 && floor <= initial) {
                    problems.push(format!("learning rate floor {floor} outside [0, initial]"));
                }
            }
        }
    }
}

/// Session-stage rate: halved every 10 epochs from 2e-4, clamped at 2e-5.
pub fn lstm_lr_schedule(epoch: usize) -> f64 {
    LrSchedule::lstm().rate(epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::Single => 32,
            Precision::Double => 64,
        }
    }
}

impl TryFrom<u32> for Precision {
    type Error = String;
    fn try_from(bits: u32) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Precision::Single),
            64 => Ok(Precision::Double),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        p.bits()
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bits: u32 = s.parse().map_err(|_| Error::Argument(format!("precision '{s}' is not 32 or 64")))?;
        Precision::try_from(bits).map_err(Error::Argument)
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Per-class loss weights, either fixed or derived from training counts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "WeightsRepr", into = "WeightsRepr")]
pub enum ClassWeights {
    #[default]
    Auto,
    Fixed([f64; 3]),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WeightsRepr {
    Name(String),
    Fixed([f64; 3]),
}

impl TryFrom<WeightsRepr> for ClassWeights {
    type Error = String;
    fn try_from(r: WeightsRepr) -> std::result::Result<Self, String> {
        match r {
            WeightsRepr::Name(s) if s == "auto" => Ok(ClassWeights::Auto),
            WeightsRepr::Name(s) => Err(format!("class weights must be \"auto\" or three numbers, got \"{s}\"")),
            WeightsRepr::Fixed(w) => Ok(ClassWeights::Fixed(w)),
        }
    }
}

impl From<ClassWeights> for WeightsRepr {
    fn from(w: ClassWeights) -> Self {
        match w {
            ClassWeights::Auto => WeightsRepr::Name("auto".into()),
            ClassWeights::Fixed(w) => WeightsRepr::Fixed(w),
        }
    }
}

impl ClassWeights {
    pub fn resolve(&self, counts: [usize; 3]) -> Result<[f64; 3]> {
        match *self {
            ClassWeights::Auto => compute_class_weights(counts),
            ClassWeights::Fixed(w) => Ok(w),
        }
    }
}

/// `w_c = N / (3 N_c)`.
pub fn compute_class_weights(counts: [usize; 3]) -> Result<[f64; 3]> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        bail!(Argument, "class {} has no training samples; cannot weight it", SeverityClass::ALL[c]);
    }
    let total: usize = counts.iter().sum();
    Ok(counts.map(|n| total as f64 / (3.0 * n as f64)))
}

pub fn class_counts<I: IntoIterator<Item = SeverityClass>>(classes: I) -> [usize; 3] {
    let mut counts = [0; 3];
    for c in classes {
        counts[c.index()] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub class_weights: ClassWeights,
    pub seed: u64,
    pub precision: Precision,
    /// Disable to run every epoch and keep the final parameters.
    pub early_stopping: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::segment()
    }
}

impl TrainConfig {
    pub fn segment() -> Self {
        Self {
            schedule: LrSchedule::Constant {
                rate: SEGMENT_LEARNING_RATE,
            },
            max_epochs: 300,
            patience: 15,
            batch_size: 128,
            class_weights: ClassWeights::Auto,
            seed: 0,
            precision: Precision::Single,
            early_stopping: true,
            adam: AdamConfig::default(),
        }
    }

    pub fn session() -> Self {
        Self {
            schedule: LrSchedule::lstm(),
            ..Self::segment()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        self.schedule.validate(&mut p);
        if self.max_epochs == 0 {
            p.push("max_epochs must be at least 1".into());
        }
        if self.patience >= self.max_epochs {
            p.push(format!("patience {} must be below max_epochs {}", self.patience, self.max_epochs));
        }
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".into());
        }
        if let ClassWeights::Fixed(w) = self.class_weights {
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                p.push(format!("class weights {w:?} must be positive"));
            }
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 {
            p.push(format!("invalid Adam settings {a:?}"));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_uar: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub class_weights: [f64; 3],
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn learning_rates(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.learning_rate).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::evaluation::write_csv(path, &self.epochs)
    }
}

/// Patience counter over validation loss. Only a strict decrease counts as
/// an improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub wait: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopVerdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopVerdict {
        if val_loss < self.best_loss || self.best_epoch == 0 {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.wait = 0;
            return StopVerdict::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            StopVerdict::Stop
        } else {
            StopVerdict::Continue
        }
    }
}

/// Mean over rows of `-w[y] * log softmax(z)[y]`, evaluated in f64.
pub fn weighted_cross_entropy(logits: &[Vec<f64>], targets: &[usize], weights: &[f64; 3]) -> Result<f64> {
    if logits.is_empty() || logits.len() != targets.len() {
        bail!(Shape, "{} logit rows for {} targets", logits.len(), targets.len());
    }
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(targets) {
        if y >= z.len() {
            bail!(Argument, "target {} out of range for {} classes", y, z.len());
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += weights[y] * (lse - z[y]);
    }
    Ok(total / logits.len() as f64)
}

fn uar_of(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        cm.counts[t][p] += 1;
    }
    Ok(metrics(&cm)?.uar)
}

fn argmax(z: &[f64]) -> usize {
    z.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

/// One model plus its training and validation data, seen by the shared loop.
pub trait TrainTask<T: Real> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    fn train_len(&self) -> usize;
    /// Smallest batch the model accepts in training mode.
    fn min_batch(&self) -> usize;
    fn batch_loss(
        &self,
        g: &mut Graph<T>,
        batch: &[usize],
        weights: &[f64; 3],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<BnUpdate<T>>)>;
    /// Eval-mode logits and targets over the validation set.
    fn validation_logits(&self) -> Result<(Vec<Vec<f64>>, Vec<usize>)>;
}

/// Splits a shuffled order into batches, folding a tail shorter than
/// `min_batch` into the previous batch.
pub fn make_batches(order: &[usize], batch_size: usize, min_batch: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(batch_size.max(min_batch).max(1)).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() < min_batch) {
        let tail = batches.pop().expect("checked length").len();
        let prev = batches.pop().expect("checked length").len();
        batches.push(&order[order.len() - tail - prev..]);
    }
    batches
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub history: History,
    pub adam: AdamState<T>,
}

/// Mini-batch Adam with weighted cross-entropy, early stopping on validation
/// loss and restoration of the best-epoch parameters.
pub fn fit<T: Real, K: TrainTask<T>>(task: &mut K, cfg: &TrainConfig, weights: [f64; 3]) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let n = task.train_len();
    if n == 0 {
        bail!(Argument, "empty training set");
    }
    if n < task.min_batch() {
        bail!(Argument, "{} training samples; the model needs batches of at least {}", n, task.min_batch());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(task.store(), cfg.adam, cfg.schedule.rate(1));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = task.store().snapshot();
    let mut history = History {
        class_weights: weights,
        ..History::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_epochs {
        adam.learning_rate = cfg.schedule.rate(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in make_batches(&order, cfg.batch_size, task.min_batch()) {
            let mut g = Graph::new();
            let (loss, updates) = task.batch_loss(&mut g, batch, &weights, &mut rng)?;
            total += g.value(loss).data()[0].f64() * batch.len() as f64;
            g.backward(loss)?;
            let store = task.store_mut();
            store.zero_grads();
            g.accumulate_param_grads(store);
            adam_step(store, &mut adam)?;
            apply_bn_updates(store, &updates, BN_MOMENTUM);
        }
        let train_loss = total / n as f64;
        let (logits, targets) = task.validation_logits()?;
        let val_loss = weighted_cross_entropy(&logits, &targets, &weights)?;
        let predicted: Vec<usize> = logits.iter().map(|z| argmax(z)).collect();
        let val_uar = uar_of(&targets, &predicted)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            bail!(Numeric, "loss diverged at epoch {} (train {}, validation {})", epoch, train_loss, val_loss);
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_uar,
            learning_rate: adam.learning_rate,
        });
        debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} uar {val_uar:.4} lr {:.2e}", adam.learning_rate);
        match stopper.observe(epoch, val_loss) {
            StopVerdict::Improved => best = task.store().snapshot(),
            StopVerdict::Stop if cfg.early_stopping => {
                history.stopped_early = true;
                info!("early stop at epoch {epoch}; best epoch {}", stopper.best_epoch);
                break;
            }
            _ => {}
        }
    }
    history.best_epoch = stopper.best_epoch;
    if cfg.early_stopping {
        task.store_mut().restore(&best);
    }
    Ok(TrainOutcome { history, adam })
}

/// A fixed-shape model input with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInput {
    pub values: Vec<f64>,
    pub class: SeverityClass,
}

struct SegmentTask<'a, M> {
    model: &'a mut M,
    train: &'a [LabeledInput],
    val: &'a [LabeledInput],
    batch_size: usize,
}

impl<T: Real, M: SegmentModel<T>> TrainTask<T> for SegmentTask<'_, M> {
    fn store(&self) -> &ParamStore<T> {
        self.model.store()
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.model.store_mut()
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn min_batch(&self) -> usize {
        2
    }

    fn batch_loss(
        &self,
        g: &mut Graph<T>,
        batch: &[usize],
        weights: &[f64; 3],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<BnUpdate<T>>)> {
        let samples: Vec<&[f64]> = batch.iter().map(|&i| self.train[i].values.as_slice()).collect();
        let x = batch_input(g, self.model.input_shape(), &samples)?;
        let f = self.model.forward(g, x, Mode::Train, rng)?;
        let targets: Vec<usize> = batch.iter().map(|&i| self.train[i].class.index()).collect();
        let w: Vec<T> = targets.iter().map(|&t| T::lit(weights[t])).collect();
        let loss = g.softmax_cross_entropy(f.logits, &targets, &w)?;
        Ok((loss, f.bn_updates))
    }

    fn validation_logits(&self) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        segment_logits(self.model, self.val, self.batch_size)
    }
}

fn segment_logits<T: Real, M: SegmentModel<T>>(
    model: &M,
    data: &[LabeledInput],
    batch_size: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut logits = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let samples: Vec<&[f64]> = chunk.iter().map(|s| s.values.as_slice()).collect();
        let x = batch_input(&mut g, model.input_shape(), &samples)?;
        let f = model.forward(&mut g, x, Mode::Eval, &mut rng)?;
        let classes = g.shape(f.logits)[1];
        logits.extend(g.value(f.logits).data().chunks(classes).map(|r| r.iter().map(|v| v.f64()).collect()));
    }
    Ok((logits, data.iter().map(|s| s.class.index()).collect()))
}

fn check_inputs(what: &str, data: &[LabeledInput], shape: [usize; 3]) -> Result<()> {
    if data.is_empty() {
        bail!(Argument, "empty {} set", what);
    }
    let per: usize = shape.iter().product();
    if let Some(s) = data.iter().find(|s| s.values.len() != per) {
        bail!(Shape, "{} sample has {} values, model expects {:?}", what, s.values.len(), shape);
    }
    Ok(())
}

/// Trains any segment-level model (dilated or baseline CNN) in place.
pub fn train_segment_model<T: Real, M: SegmentModel<T>>(
    model: &mut M,
    train: &[LabeledInput],
    val: &[LabeledInput],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    check_inputs("training", train, model.input_shape())?;
    check_inputs("validation", val, model.input_shape())?;
    let weights = cfg.class_weights.resolve(class_counts(train.iter().map(|s| s.class)))?;
    info!("segment training: {} train, {} validation, weights {:?}", train.len(), val.len(), weights);
    let mut task = SegmentTask {
        model,
        train,
        val,
        batch_size: cfg.batch_size,
    };
    fit(&mut task, cfg, weights)
}

/// Fraction of samples whose eval-mode prediction matches the label.
pub fn segment_accuracy<T: Real, M: SegmentModel<T>>(model: &M, data: &[LabeledInput]) -> Result<f64> {
    let samples: Vec<&[f64]> = data.iter().map(|s| s.values.as_slice()).collect();
    let preds = predict_segments(model, &samples, 128)?;
    let hits = preds.iter().zip(data).filter(|(p, s)| p.predicted == s.class).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Ordered segment embeddings of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSequence {
    pub session_id: String,
    pub embeddings: Vec<Vec<f64>>,
    pub class: SeverityClass,
}

struct SessionTask<'a, T> {
    model: &'a mut SessionLstm<T>,
    train: &'a [SessionSequence],
    val: &'a [SessionSequence],
    batch_size: usize,
}

impl<T: Real> TrainTask<T> for SessionTask<'_, T> {
    fn store(&self) -> &ParamStore<T> {
        &self.model.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.model.store
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn min_batch(&self) -> usize {
        1
    }

    fn batch_loss(
        &self,
        g: &mut Graph<T>,
        batch: &[usize],
        weights: &[f64; 3],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<BnUpdate<T>>)> {
        let seqs: Vec<&[Vec<f64>]> = batch.iter().map(|&i| self.train[i].embeddings.as_slice()).collect();
        let logits = self.model.forward_batch(g, &seqs, Mode::Train, rng)?;
        let targets: Vec<usize> = batch.iter().map(|&i| self.train[i].class.index()).collect();
        let w: Vec<T> = targets.iter().map(|&t| T::lit(weights[t])).collect();
        Ok((g.softmax_cross_entropy(logits, &targets, &w)?, Vec::new()))
    }

    fn validation_logits(&self) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        session_logits(self.model, self.val, self.batch_size)
    }
}

/// Eval-mode logits for a list of sessions, batched with padding.
pub fn session_logits<T: Real>(
    model: &SessionLstm<T>,
    data: &[SessionSequence],
    batch_size: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut logits = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let seqs: Vec<&[Vec<f64>]> = chunk.iter().map(|s| s.embeddings.as_slice()).collect();
        let out = model.forward_batch(&mut g, &seqs, Mode::Eval, &mut rng)?;
        let classes = g.shape(out)[1];
        logits.extend(g.value(out).data().chunks(classes).map(|r| r.iter().map(|v| v.f64()).collect()));
    }
    Ok((logits, data.iter().map(|s| s.class.index()).collect()))
}

fn check_sequences(what: &str, data: &[SessionSequence], width: usize) -> Result<()> {
    if data.is_empty() {
        bail!(Argument, "empty {} set", what);
    }
    for s in data {
        if s.embeddings.is_empty() {
            bail!(Argument, "{} session '{}' has no segments", what, s.session_id);
        }
        if let Some(e) = s.embeddings.iter().find(|e| e.len() != width) {
            bail!(Shape, "session '{}' embedding width {} does not match LSTM input {}", s.session_id, e.len(), width);
        }
    }
    Ok(())
}

pub fn train_session_model<T: Real>(
    model: &mut SessionLstm<T>,
    train: &[SessionSequence],
    val: &[SessionSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let width = model.config.input_size;
    check_sequences("training", train, width)?;
    check_sequences("validation", val, width)?;
    let weights = cfg.class_weights.resolve(class_counts(train.iter().map(|s| s.class)))?;
    info!("session training: {} train, {} validation, weights {:?}", train.len(), val.len(), weights);
    let mut task = SessionTask {
        model,
        train,
        val,
        batch_size: cfg.batch_size,
    };
    fit(&mut task, cfg, weights)
}

/// Segment ACFs of one session in temporal order.
#[derive(Debug, Clone)]
pub struct SessionAcfs {
    pub session_id: String,
    pub segments: Vec<AcfMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionEmbeddings {
    pub session_id: String,
    pub embeddings: Vec<Vec<f64>>,
}

/// D1 activations of every segment, standardized with the training
/// statistics and run in eval mode. Sessions without segments are skipped.
pub fn export_embeddings<T: Real, M: SegmentModel<T>>(
    model: &M,
    standardizer: &AcfStandardizer,
    sessions: &[SessionAcfs],
) -> Result<Vec<SessionEmbeddings>> {
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        if s.segments.is_empty() {
            warn!("session '{}' has no segments; skipped", s.session_id);
            continue;
        }
        let standardized = s
            .segments
            .iter()
            .map(|m| apply_acf_standardizer(standardizer, m))
            .collect::<Result<Vec<_>>>()?;
        let samples: Vec<&[f64]> = standardized.iter().map(|m| m.values.as_slice()).collect();
        let preds = predict_segments(model, &samples, 128)?;
        out.push(SessionEmbeddings {
            session_id: s.session_id.clone(),
            embeddings: preds.into_iter().map(|p| p.embedding).collect(),
        });
    }
    Ok(out)
}

/// Writes embeddings as a container with one `emb/<session_id>` array of
/// shape `[segments, width]` per session.
pub fn save_embeddings(path: &Path, sessions: &[SessionEmbeddings]) -> Result<()> {
    let ids: Vec<&str> = sessions.iter().map(|s| s.session_id.as_str()).collect();
    let mut c = Container::new(serde_json::json!({"content": "embeddings", "sessions": ids}));
    for s in sessions {
        let width = s.embeddings.first().map_or(0, Vec::len);
        if s.embeddings.iter().any(|e| e.len() != width) {
            bail!(Shape, "session '{}' has ragged embeddings", s.session_id);
        }
        let data = s.embeddings.concat();
        c.push(NamedArray::new(format!("emb/{}", s.session_id), vec![s.embeddings.len(), width], data)?);
    }
    c.save(path)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<SessionEmbeddings>> {
    let c = Container::load(path)?;
    if c.metadata["content"] != "embeddings" {
        bail!(Format, "{} does not hold embeddings", path.display());
    }
    let ids: Vec<String> = serde_json::from_value(c.metadata["sessions"].clone())?;
    ids.into_iter()
        .map(|id| {
            let a = c.array(&format!("emb/{id}"))?;
            let width = a.shape.get(1).copied().unwrap_or(0).max(1);
            Ok(SessionEmbeddings {
                session_id: id,
                embeddings: a.data.chunks(width).map(<[f64]>::to_vec).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
