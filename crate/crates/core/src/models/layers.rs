use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{
    dense, Activation, BatchStats, Conv2dSpec, Graph, Mode, ParamId, ParamStore, Real, Tensor, Var,
};
use crate::error::Result;

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-5;

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize, limit: f64) -> Vec<T> {
    let dist = Uniform::new_inclusive(-limit, limit);
    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
}

/// He-uniform bound `sqrt(6 / fan_in)`.
fn he_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Running-statistics update produced by a training-mode batch norm,
/// applied to the store once the step's graph is released.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats<T>,
}

pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    let (keep, take) = (T::lit(momentum), T::lit(1.0 - momentum));
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var)] {
            for (r, &b) in store.get_mut(id).value.data_mut().iter_mut().zip(batch.iter()) {
                *r = keep * *r + take * b;
            }
        }
    }
}

/// Bias-free convolution followed by batch norm and LeakyReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub spec: Conv2dSpec,
    pub filters: usize,
    pub in_channels: usize,
    pub kernel_size: (usize, usize),
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel_size: (usize, usize),
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel_size.0 * kernel_size.1;
        let shape = [filters, in_channels, kernel_size.0, kernel_size.1];
        let kernel = store.add(
            format!("{name}.kernel"),
            Tensor::from_vec(&shape, uniform(rng, fan_in * filters, he_limit(fan_in))).expect("shape"),
            0.0,
        );
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::full(&[filters], T::one()), 0.0);
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(&[filters]), 0.0);
        let running_mean = store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[filters]));
        let running_var = store.add_buffer(format!("{name}.bn.running_var"), Tensor::full(&[filters], T::one()));
        Self {
            kernel,
            gamma,
            beta,
            running_mean,
            running_var,
            spec,
            filters,
            in_channels,
            kernel_size,
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.filters * self.in_channels * self.kernel_size.0 * self.kernel_size.1 + 2 * self.filters
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let w = g.param(store, self.kernel);
        let z = g.conv2d(x, w, self.spec)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let eps = T::lit(BN_EPSILON);
        let n = match mode {
            Mode::Train => {
                let (n, stats) = g.batch_norm_train(z, gamma, beta, eps)?;
                updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    stats,
                });
                n
            }
            Mode::Eval => g.batch_norm_eval(
                z,
                gamma,
                beta,
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
                eps,
            )?,
        };
        Ok(g.activation(n, Activation::LeakyRelu))
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub inputs: usize,
    pub units: usize,
}

impl DenseLayer {
    /// He-uniform weights for ReLU-family layers, Glorot-uniform otherwise; zero bias.
    /// `l2` applies to the weights only.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        units: usize,
        activation: Activation,
        l2: f64,
        rng: &mut R,
    ) -> Self {
        let limit = match activation {
            Activation::None => glorot_limit(inputs, units),
            _ => he_limit(inputs),
        };
        let weights = store.add(
            format!("{name}.weights"),
            Tensor::from_vec(&[inputs, units], uniform(rng, inputs * units, limit)).expect("shape"),
            l2,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[units]), 0.0);
        Self {
            weights,
            bias,
            activation,
            inputs,
            units,
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.inputs * self.units + self.units
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weights);
        let b = g.param(store, self.bias);
        dense(g, x, w, b, self.activation)
    }
}
