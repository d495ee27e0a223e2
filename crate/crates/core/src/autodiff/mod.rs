//! Minimal reverse-mode differentiation.
//!
//! A [`Graph`] records each operation of a forward pass together with what
//! its backward rule needs. Trainable tensors live in a [`ParamStore`]; they
//! enter a graph through [`Graph::param`] and receive gradients through
//! [`Graph::accumulate_param_grads`] after [`Graph::backward`].
//!
//! Only the operators used by the segment and session classifiers exist:
//! strided/dilated 2-D convolution, affine maps, batch normalization,
//! max pooling, dropout, the (Leaky)ReLU/sigmoid/tanh nonlinearities, LSTM
//! recurrences and weighted softmax cross-entropy.

mod adam;
mod gradcheck;
mod graph;
mod lstm;
mod params;
mod real;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{gradient_check, relative_error, BlockError, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use graph::{
    conv_output_len, softmax, Activation, BatchStats, Conv2dSpec, Graph, Mode, Padding, Var,
    LEAKY_RELU_SLOPE,
};
pub use lstm::LstmLayer;
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;

use crate::error::Result;

/// `activation(x · w + b)`.
pub fn dense<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var, activation: Activation) -> Result<Var> {
    let z = g.affine(x, w, Some(b))?;
    Ok(g.activation(z, activation))
}
