use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::DenseLayer;
use crate::autodiff::{softmax, Activation, Graph, LstmLayer, Mode, ParamStore, Real, Tensor, Var};
use crate::dsp::FeatureSource;
use crate::error::{bail, Result};

/// Session classifier over the ordered sequence of segment embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionLstmConfig {
    pub input_size: usize,
    pub lstm1_units: usize,
    pub lstm2_units: usize,
    pub recurrent_dropout1: f64,
    pub recurrent_dropout2: f64,
    pub d3_units: usize,
    pub l2: f64,
    pub num_classes: usize,
}

impl Default for SessionLstmConfig {
    fn default() -> Self {
        Self::tv()
    }
}

impl SessionLstmConfig {
    fn preset(l1: usize, l2_units: usize, dp1: f64, dp2: f64, o4: usize) -> Self {
        Self {
            input_size: 64,
            lstm1_units: l1,
            lstm2_units: l2_units,
            recurrent_dropout1: dp1,
            recurrent_dropout2: dp2,
            d3_units: o4,
            l2: 0.01,
            num_classes: 3,
        }
    }

    pub fn tv() -> Self {
        Self::preset(64, 64, 0.4, 0.3, 32)
    }

    pub fn mfcc() -> Self {
        Self::preset(128, 64, 0.6, 0.4, 64)
    }

    pub fn formant() -> Self {
        Self::preset(128, 64, 0.7, 0.7, 16)
    }

    pub fn for_source(source: FeatureSource, input_size: usize) -> Self {
        let mut cfg = match source {
            FeatureSource::Mfcc => Self::mfcc(),
            FeatureSource::Formant => Self::formant(),
            _ => Self::tv(),
        };
        cfg.input_size = input_size;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if [self.input_size, self.lstm1_units, self.lstm2_units, self.d3_units, self.num_classes].contains(&0) {
            bail!(Argument, "session LSTM: all sizes must be positive");
        }
        for p in [self.recurrent_dropout1, self.recurrent_dropout2] {
            if !(0.0..1.0).contains(&p) {
                bail!(Argument, "session LSTM: recurrent dropout {} outside [0, 1)", p);
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        4 * self.lstm1_units * (self.input_size + self.lstm1_units + 1)
            + 4 * self.lstm2_units * (self.lstm1_units + self.lstm2_units + 1)
            + (self.lstm2_units * self.d3_units + self.d3_units)
            + (self.d3_units * self.num_classes + self.num_classes)
    }
}

#[derive(Debug, Clone)]
pub struct SessionLstm<T> {
    pub config: SessionLstmConfig,
    pub store: ParamStore<T>,
    pub lstm1: LstmLayer,
    pub lstm2: LstmLayer,
    pub d3: DenseLayer,
    pub output: DenseLayer,
}

pub fn build_session_lstm<T: Real>(cfg: &SessionLstmConfig, seed: u64) -> Result<SessionLstm<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let lstm1 = LstmLayer::new(&mut store, "lstm1", cfg.input_size, cfg.lstm1_units, &mut rng);
    let lstm2 = LstmLayer::new(&mut store, "lstm2", cfg.lstm1_units, cfg.lstm2_units, &mut rng);
    let d3 = DenseLayer::new(&mut store, "d3", cfg.lstm2_units, cfg.d3_units, Activation::Relu, cfg.l2, &mut rng);
    let output = DenseLayer::new(&mut store, "out", cfg.d3_units, cfg.num_classes, Activation::None, 0.0, &mut rng);
    Ok(SessionLstm {
        config: cfg.clone(),
        store,
        lstm1,
        lstm2,
        d3,
        output,
    })
}

impl<T: Real> SessionLstm<T> {
    /// Logits `[batch, classes]` for a batch of sequences. Shorter sequences
    /// are padded at the end; padded steps leave the recurrent state untouched.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        sequences: &[&[Vec<f64>]],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let batch = sequences.len();
        if batch == 0 {
            bail!(Argument, "empty batch of sessions");
        }
        if let Some(i) = sequences.iter().position(|s| s.is_empty()) {
            bail!(Argument, "session {} of the batch has no segments", i);
        }
        let width = self.config.input_size;
        for s in sequences {
            if let Some(e) = s.iter().find(|e| e.len() != width) {
                bail!(Shape, "embedding width {} does not match LSTM input size {}", e.len(), width);
            }
        }
        let steps = sequences.iter().map(|s| s.len()).max().expect("non-empty");
        let mut inputs = Vec::with_capacity(steps);
        let mut masks = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut data = Vec::with_capacity(batch * width);
            let mut mask = Vec::with_capacity(batch);
            for s in sequences {
                match s.get(t) {
                    Some(e) => {
                        data.extend(e.iter().map(|&v| T::lit(v)));
                        mask.push(T::one());
                    }
                    None => {
                        data.extend(std::iter::repeat_n(T::zero(), width));
                        mask.push(T::zero());
                    }
                }
            }
            inputs.push(g.constant(Tensor::from_vec(&[batch, width], data)?));
            masks.push(mask);
        }
        let all_real = masks.iter().all(|m| m.iter().all(|&v| v == T::one()));
        let masks = (!all_real).then_some(masks.as_slice());
        let s = &self.store;
        let cfg = &self.config;
        let seq = self.lstm1.forward(g, s, &inputs, masks, cfg.recurrent_dropout1, true, mode, rng)?;
        let last = self.lstm2.forward(g, s, &seq, masks, cfg.recurrent_dropout2, false, mode, rng)?[0];
        let h = self.d3.forward(g, s, last)?;
        self.output.forward(g, s, h)
    }
}

/// Class probabilities of one session in eval mode.
pub fn forward_session<T: Real>(model: &SessionLstm<T>, embeddings: &[Vec<f64>]) -> Result<[f64; 3]> {
    if embeddings.is_empty() {
        bail!(Argument, "session has no segment embeddings");
    }
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = model.forward_batch(&mut g, &[embeddings], Mode::Eval, &mut rng)?;
    let p = softmax(g.value(logits).data());
    if p.len() != 3 {
        bail!(Shape, "session model has {} outputs, expected 3", p.len());
    }
    Ok([p[0].f64(), p[1].f64(), p[2].f64()])
}
