use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{ConvBlock, DenseLayer};
use super::{Forward, SegmentModel};
use crate::autodiff::{conv_output_len, Activation, Conv2dSpec, Graph, Mode, Padding, ParamStore, Real, Var};
use crate::dsp::FeatureSource;
use crate::error::{bail, Result};

pub const DILATION_RATES: [usize; 4] = [1, 3, 7, 15];

/// Segment-level classifier over a standardized ACF matrix laid out as
/// `[M², D+1, 1]` (one input channel per channel pair).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DilatedCnnConfig {
    /// `M²`.
    pub input_channels: usize,
    /// `D + 1`.
    pub input_delay_bins: usize,
    /// O₁, filters in each of C1–C4.
    pub parallel_filters: usize,
    pub parallel_kernel: usize,
    pub dilation_rates: Vec<usize>,
    pub c5_filters: usize,
    pub c5_kernel: usize,
    pub c5_stride: usize,
    /// O₂.
    pub c6_filters: usize,
    /// K₁ (height; width is 1).
    pub c6_kernel: usize,
    pub d1_units: usize,
    /// O₃.
    pub d2_units: usize,
    pub dropout: f64,
    pub l2: f64,
    pub num_classes: usize,
}

impl Default for DilatedCnnConfig {
    fn default() -> Self {
        Self::tv()
    }
}

impl DilatedCnnConfig {
    fn preset(channels: usize, o1: usize, o2: usize, k1: usize, o3: usize, dropout: f64) -> Self {
        Self {
            input_channels: channels * channels,
            input_delay_bins: 51,
            parallel_filters: o1,
            parallel_kernel: 15,
            dilation_rates: DILATION_RATES.to_vec(),
            c5_filters: 16,
            c5_kernel: 3,
            c5_stride: 2,
            c6_filters: o2,
            c6_kernel: k1,
            d1_units: 64,
            d2_units: o3,
            dropout,
            l2: 0.01,
            num_classes: 3,
        }
    }

    /// 8 vocal tract variables.
    pub fn tv() -> Self {
        Self::preset(8, 16, 8, 4, 16, 0.5)
    }

    pub fn mfcc() -> Self {
        Self::preset(12, 32, 16, 3, 8, 0.5)
    }

    pub fn formant() -> Self {
        Self::preset(3, 32, 8, 4, 16, 0.4)
    }

    /// Preset for a feature source, resized to `channels` input channels and
    /// `max_delay + 1` delay bins. Sources without a tuned row use the TV row.
    pub fn for_source(source: FeatureSource, channels: usize, max_delay: usize) -> Self {
        let mut cfg = match source {
            FeatureSource::Mfcc => Self::mfcc(),
            FeatureSource::Formant => Self::formant(),
            _ => Self::tv(),
        };
        cfg.input_channels = channels * channels;
        cfg.input_delay_bins = max_delay + 1;
        cfg
    }

    /// Height after C5 and after C6.
    pub fn heights(&self) -> Result<(usize, usize)> {
        let (h5, _) = conv_output_len(self.input_delay_bins, self.c5_kernel, self.c5_stride, 1, Padding::Same)?;
        let (h6, _) = conv_output_len(h5, self.c6_kernel, 1, 1, Padding::Valid)?;
        Ok((h5, h6))
    }

    pub fn flatten_width(&self) -> Result<usize> {
        Ok(self.c6_filters * self.heights()?.1)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_channels", self.input_channels),
            ("input_delay_bins", self.input_delay_bins),
            ("parallel_filters", self.parallel_filters),
            ("parallel_kernel", self.parallel_kernel),
            ("c5_filters", self.c5_filters),
            ("c5_kernel", self.c5_kernel),
            ("c5_stride", self.c5_stride),
            ("c6_filters", self.c6_filters),
            ("c6_kernel", self.c6_kernel),
            ("d1_units", self.d1_units),
            ("d2_units", self.d2_units),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            bail!(Argument, "dilated CNN: {} must be positive", name);
        }
        if self.dilation_rates != DILATION_RATES {
            bail!(Argument, "dilated CNN: dilation rates must be {:?}, got {:?}", DILATION_RATES, self.dilation_rates);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Argument, "dilated CNN: dropout {} outside [0, 1)", self.dropout);
        }
        if self.l2 < 0.0 {
            bail!(Argument, "dilated CNN: negative L2 coefficient");
        }
        self.heights().map(|_| ())
    }

    /// Whether every tunable value lies in the grid-search ranges.
    pub fn in_search_grid(&self) -> bool {
        [16, 32].contains(&self.parallel_filters)
            && [8, 16].contains(&self.c6_filters)
            && [3, 4].contains(&self.c6_kernel)
            && [8, 16].contains(&self.d2_units)
            && [0.4, 0.5].contains(&self.dropout)
    }

    /// Trainable parameter count in closed form. Batch-norm running
    /// statistics are buffers and not counted.
    ///
    /// ```text
    /// C1–C4   4·O₁·C_in·15 + 4·2·O₁
    /// C5      16·4O₁·3 + 2·16
    /// C6      O₂·16·K₁ + 2·O₂
    /// D1      F·d1 + d1          F = O₂·(ceil((D+1)/2) − K₁ + 1)
    /// D2      d1·O₃ + O₃
    /// out     O₃·3 + 3
    /// ```
    pub fn parameter_count(&self) -> Result<usize> {
        let n = self.dilation_rates.len();
        let cat = n * self.parallel_filters;
        let f = self.flatten_width()?;
        Ok(n * (self.parallel_filters * self.input_channels * self.parallel_kernel + 2 * self.parallel_filters)
            + (self.c5_filters * cat * self.c5_kernel + 2 * self.c5_filters)
            + (self.c6_filters * self.c5_filters * self.c6_kernel + 2 * self.c6_filters)
            + (f * self.d1_units + self.d1_units)
            + (self.d1_units * self.d2_units + self.d2_units)
            + (self.d2_units * self.num_classes + self.num_classes))
    }
}

#[derive(Debug, Clone)]
pub struct DilatedCnn<T> {
    pub config: DilatedCnnConfig,
    pub store: ParamStore<T>,
    pub parallel: Vec<ConvBlock>,
    pub c5: ConvBlock,
    pub c6: ConvBlock,
    pub d1: DenseLayer,
    pub d2: DenseLayer,
    pub output: DenseLayer,
}

pub fn build_dilated_cnn<T: Real>(cfg: &DilatedCnnConfig, seed: u64) -> Result<DilatedCnn<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let parallel = cfg
        .dilation_rates
        .iter()
        .enumerate()
        .map(|(k, &rate)| {
            ConvBlock::new(
                &mut store,
                &format!("c{}", k + 1),
                cfg.input_channels,
                cfg.parallel_filters,
                (cfg.parallel_kernel, 1),
                Conv2dSpec {
                    stride: (1, 1),
                    dilation: (rate, 1),
                    padding: Padding::Same,
                },
                &mut rng,
            )
        })
        .collect::<Vec<_>>();
    let c5 = ConvBlock::new(
        &mut store,
        "c5",
        parallel.len() * cfg.parallel_filters,
        cfg.c5_filters,
        (cfg.c5_kernel, 1),
        Conv2dSpec {
            stride: (cfg.c5_stride, 1),
            dilation: (1, 1),
            padding: Padding::Same,
        },
        &mut rng,
    );
    let c6 = ConvBlock::new(
        &mut store,
        "c6",
        cfg.c5_filters,
        cfg.c6_filters,
        (cfg.c6_kernel, 1),
        Conv2dSpec {
            padding: Padding::Valid,
            ..Conv2dSpec::default()
        },
        &mut rng,
    );
    let flat = cfg.flatten_width()?;
    let d1 = DenseLayer::new(&mut store, "d1", flat, cfg.d1_units, Activation::Relu, cfg.l2, &mut rng);
    let d2 = DenseLayer::new(&mut store, "d2", cfg.d1_units, cfg.d2_units, Activation::Relu, cfg.l2, &mut rng);
    let output = DenseLayer::new(&mut store, "out", cfg.d2_units, cfg.num_classes, Activation::None, 0.0, &mut rng);
    Ok(DilatedCnn {
        config: cfg.clone(),
        store,
        parallel,
        c5,
        c6,
        d1,
        d2,
        output,
    })
}

impl<T: Real> DilatedCnn<T> {
    /// Forward pass returning the flattened C6 output as well, for inspection.
    pub fn forward_detailed<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Forward<T>, Var)> {
        let mut updates = Vec::new();
        let s = &self.store;
        let branches = self
            .parallel
            .iter()
            .map(|b| b.forward(g, s, x, mode, &mut updates))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_channels(&branches)?;
        let h5 = self.c5.forward(g, s, cat, mode, &mut updates)?;
        let h6 = self.c6.forward(g, s, h5, mode, &mut updates)?;
        let flat = g.flatten(h6)?;
        let embedding = self.d1.forward(g, s, flat)?;
        let e = g.dropout(embedding, self.config.dropout, mode, rng)?;
        let h = self.d2.forward(g, s, e)?;
        let h = g.dropout(h, self.config.dropout, mode, rng)?;
        let logits = self.output.forward(g, s, h)?;
        Ok((
            Forward {
                logits,
                embedding,
                bn_updates: updates,
            },
            flat,
        ))
    }
}

impl<T: Real> SegmentModel<T> for DilatedCnn<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn input_shape(&self) -> [usize; 3] {
        [self.config.input_channels, self.config.input_delay_bins, 1]
    }

    fn embedding_width(&self) -> usize {
        self.config.d1_units
    }

    fn forward<R: Rng + ?Sized>(&self, g: &mut Graph<T>, x: Var, mode: Mode, rng: &mut R) -> Result<Forward<T>> {
        self.forward_detailed(g, x, mode, rng).map(|(f, _)| f)
    }
}
