use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one store, indexed like the store.
/// Non-trainable entries keep empty moment vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub config: AdamConfig,
    pub learning_rate: f64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<T>> = store
            .iter()
            .map(|(_, p)| {
                if p.trainable {
                    vec![T::zero(); p.value.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self {
            step: 0,
            config,
            learning_rate,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
///
/// L2 regularization enters as `lambda * theta` added to each gradient of a
/// parameter with a positive coefficient. Nothing is modified if any
/// gradient is non-finite.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    for (_, p) in store.iter() {
        if p.trainable && !p.grad.all_finite() {
            bail!(Numeric, "non-finite gradient in parameter '{}'", p.name);
        }
    }
    if state.m.len() != store.len() {
        bail!(Shape, "optimizer state tracks {} tensors, store has {}", state.m.len(), store.len());
    }
    state.step += 1;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
    let (c1, c2) = (T::lit(correction1), T::lit(correction2));
    let (lr, eps) = (T::lit(state.learning_rate), T::lit(epsilon));

    for (idx, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let lambda = T::lit(p.l2_coefficient);
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        let theta = p.value.data_mut();
        for (k, &g0) in p.grad.data().iter().enumerate() {
            let g = g0 + lambda * theta[k];
            m[k] = b1 * m[k] + one_b1 * g;
            v[k] = b2 * v[k] + one_b2 * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            theta[k] = theta[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
