//! The segment-level dilated CNN, the baseline CNN and the session LSTM.

mod baseline;
mod dilated;
mod layers;
mod session;

pub use baseline::{build_baseline_cnn, BaselineCnn, BaselineCnnConfig};
pub use dilated::{build_dilated_cnn, DilatedCnn, DilatedCnnConfig, DILATION_RATES};
pub use layers::{apply_bn_updates, BnUpdate, ConvBlock, DenseLayer, BN_EPSILON, BN_MOMENTUM};
pub use session::{build_session_lstm, forward_session, SessionLstm, SessionLstmConfig};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acf::AcfMatrix;
use crate::autodiff::{Graph, Mode, ParamStore, Real, Tensor, Var};
use crate::corpus::SeverityClass;
use crate::error::{bail, Result};

/// Nodes produced by one forward pass of a segment model.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub logits: Var,
    /// First dense layer activation, exported to the session stage.
    pub embedding: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// A model mapping one fixed-shape sample to class logits.
pub trait SegmentModel<T: Real> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    /// Per-sample `[channels, height, width]`.
    fn input_shape(&self) -> [usize; 3];
    fn embedding_width(&self) -> usize;
    fn forward<R: Rng + ?Sized>(&self, g: &mut Graph<T>, x: Var, mode: Mode, rng: &mut R) -> Result<Forward<T>>;
}

/// Stacks flat samples into a `[batch, C, H, W]` input node.
pub fn batch_input<T: Real>(g: &mut Graph<T>, shape: [usize; 3], samples: &[&[f64]]) -> Result<Var> {
    let per = shape.iter().product::<usize>();
    if let Some(s) = samples.iter().find(|s| s.len() != per) {
        bail!(Shape, "sample of {} values does not match model input {:?}", s.len(), shape);
    }
    let data = samples.iter().flat_map(|s| s.iter().map(|&v| T::lit(v))).collect();
    let t = Tensor::from_vec(&[samples.len(), shape[0], shape[1], shape[2]], data)?;
    Ok(g.input(t, false))
}

/// Softmax of each logit row, computed in f64.
pub fn row_probabilities<T: Real>(g: &Graph<T>, logits: Var) -> Vec<Vec<f64>> {
    let classes = g.shape(logits)[1];
    g.value(logits)
        .data()
        .chunks(classes)
        .map(|row| {
            let z: Vec<f64> = row.iter().map(|v| v.f64()).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub probabilities: [f64; 3],
    pub predicted: SeverityClass,
    pub confidence: f64,
    pub embedding: Vec<f64>,
}

impl SegmentPrediction {
    pub fn from_probabilities(probabilities: [f64; 3], embedding: Vec<f64>) -> Self {
        let (best, confidence) = probabilities
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, p)| if p > acc.1 { (i, p) } else { acc });
        Self {
            probabilities,
            predicted: SeverityClass::ALL[best],
            confidence,
            embedding,
        }
    }
}

/// Eval-mode predictions for flat samples, in batches of `batch_size`.
pub fn predict_segments<T: Real, M: SegmentModel<T>>(
    model: &M,
    samples: &[&[f64]],
    batch_size: usize,
) -> Result<Vec<SegmentPrediction>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let x = batch_input(&mut g, model.input_shape(), chunk)?;
        let f = model.forward(&mut g, x, Mode::Eval, &mut rng)?;
        let probs = row_probabilities(&g, f.logits);
        if probs.first().is_some_and(|p| p.len() != 3) {
            bail!(Shape, "segment model has {} outputs, expected 3", probs[0].len());
        }
        let width = model.embedding_width();
        let emb = g.value(f.embedding).data();
        for (k, p) in probs.into_iter().enumerate() {
            let e = emb[k * width..(k + 1) * width].iter().map(|v| v.f64()).collect();
            out.push(SegmentPrediction::from_probabilities([p[0], p[1], p[2]], e));
        }
    }
    Ok(out)
}

/// Prediction for one standardized ACF matrix. Training mode applies
/// dropout but batch statistics need at least two samples, so single
/// inputs are only accepted in eval mode.
pub fn forward_segment<T: Real, R: Rng + ?Sized>(
    model: &DilatedCnn<T>,
    acf: &AcfMatrix,
    mode: Mode,
    rng: &mut R,
) -> Result<SegmentPrediction> {
    let expected = (model.config.input_channels, model.config.input_delay_bins);
    if acf.shape() != expected {
        bail!(Shape, "ACF shape {:?} does not match model input {:?}", acf.shape(), expected);
    }
    if mode == Mode::Train {
        bail!(Argument, "training-mode forward needs a batch; use the training loop");
    }
    let mut g = Graph::new();
    let x = batch_input(&mut g, model.input_shape(), &[&acf.values])?;
    let f = model.forward(&mut g, x, mode, rng)?;
    let p = &row_probabilities(&g, f.logits)[0];
    let e = g.value(f.embedding).data().iter().map(|v| v.f64()).collect();
    Ok(SegmentPrediction::from_probabilities([p[0], p[1], p[2]], e))
}

#[cfg(test)]
mod tests;
