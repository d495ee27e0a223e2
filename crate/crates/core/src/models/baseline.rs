use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{ConvBlock, DenseLayer};
use super::{Forward, SegmentModel};
use crate::autodiff::{Activation, Conv2dSpec, Graph, Mode, ParamStore, Real, Var};
use crate::error::{bail, Result};

/// Two-layer CNN over raw frame-level features laid out as `[channels, frames, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineCnnConfig {
    pub input_channels: usize,
    pub input_frames: usize,
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_kernel: usize,
    pub pool: usize,
    pub dropout1: f64,
    pub dropout2: f64,
    pub dense1_units: usize,
    pub l2: f64,
    pub num_classes: usize,
}

impl Default for BaselineCnnConfig {
    /// 23 eGeMAPS descriptors over 10 s at 100 Hz.
    fn default() -> Self {
        Self {
            input_channels: 23,
            input_frames: 1000,
            conv1_filters: 256,
            conv1_kernel: 8,
            conv2_filters: 128,
            conv2_kernel: 8,
            pool: 8,
            dropout1: 0.5,
            dropout2: 0.7,
            dense1_units: 64,
            l2: 0.01,
            num_classes: 3,
        }
    }
}

impl BaselineCnnConfig {
    /// Frames left after each pooling stage.
    pub fn pooled_frames(&self) -> (usize, usize) {
        let p1 = self.input_frames / self.pool;
        (p1, p1 / self.pool)
    }

    pub fn flatten_width(&self) -> usize {
        self.conv2_filters * self.pooled_frames().1
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.input_channels,
            self.input_frames,
            self.conv1_filters,
            self.conv1_kernel,
            self.conv2_filters,
            self.conv2_kernel,
            self.pool,
            self.dense1_units,
            self.num_classes,
        ];
        if counts.contains(&0) {
            bail!(Argument, "baseline CNN: all sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout1) || !(0.0..1.0).contains(&self.dropout2) {
            bail!(Argument, "baseline CNN: dropout outside [0, 1)");
        }
        if self.pooled_frames().1 == 0 {
            bail!(
                Shape,
                "baseline CNN: {} frames vanish after two pools of {}",
                self.input_frames,
                self.pool
            );
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        (self.conv1_filters * self.input_channels * self.conv1_kernel + 2 * self.conv1_filters)
            + (self.conv2_filters * self.conv1_filters * self.conv2_kernel + 2 * self.conv2_filters)
            + (self.flatten_width() * self.dense1_units + self.dense1_units)
            + (self.dense1_units * self.num_classes + self.num_classes)
    }
}

#[derive(Debug, Clone)]
pub struct BaselineCnn<T> {
    pub config: BaselineCnnConfig,
    pub store: ParamStore<T>,
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub dense1: DenseLayer,
    pub output: DenseLayer,
}

pub fn build_baseline_cnn<T: Real>(cfg: &BaselineCnnConfig, seed: u64) -> Result<BaselineCnn<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let conv1 = ConvBlock::new(
        &mut store,
        "conv1",
        cfg.input_channels,
        cfg.conv1_filters,
        (cfg.conv1_kernel, 1),
        Conv2dSpec::default(),
        &mut rng,
    );
    let conv2 = ConvBlock::new(
        &mut store,
        "conv2",
        cfg.conv1_filters,
        cfg.conv2_filters,
        (cfg.conv2_kernel, 1),
        Conv2dSpec::default(),
        &mut rng,
    );
    let dense1 = DenseLayer::new(
        &mut store,
        "dense1",
        cfg.flatten_width(),
        cfg.dense1_units,
        Activation::Relu,
        cfg.l2,
        &mut rng,
    );
    let output = DenseLayer::new(&mut store, "out", cfg.dense1_units, cfg.num_classes, Activation::None, 0.0, &mut rng);
    Ok(BaselineCnn {
        config: cfg.clone(),
        store,
        conv1,
        conv2,
        dense1,
        output,
    })
}

impl<T: Real> SegmentModel<T> for BaselineCnn<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn input_shape(&self) -> [usize; 3] {
        [self.config.input_channels, self.config.input_frames, 1]
    }

    fn embedding_width(&self) -> usize {
        self.config.dense1_units
    }

    fn forward<R: Rng + ?Sized>(&self, g: &mut Graph<T>, x: Var, mode: Mode, rng: &mut R) -> Result<Forward<T>> {
        let cfg = &self.config;
        let s = &self.store;
        let mut updates = Vec::new();
        let h = self.conv1.forward(g, s, x, mode, &mut updates)?;
        let h = g.dropout(h, cfg.dropout1, mode, rng)?;
        let h = g.max_pool(h, (cfg.pool, 1))?;
        let h = self.conv2.forward(g, s, h, mode, &mut updates)?;
        let h = g.dropout(h, cfg.dropout2, mode, rng)?;
        let h = g.max_pool(h, (cfg.pool, 1))?;
        let flat = g.flatten(h)?;
        let embedding = self.dense1.forward(g, s, flat)?;
        let logits = self.output.forward(g, s, embedding)?;
        Ok(Forward {
            logits,
            embedding,
            bn_updates: updates,
        })
    }
}
