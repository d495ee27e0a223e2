use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{Graph, Mode, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{bail, Result};

/// Parameters of one LSTM layer. Gate blocks are packed along the last axis
/// in the order input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub input_kernel: ParamId,
    pub recurrent_kernel: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub units: usize,
}

impl LstmLayer {
    /// Uniform `±1/sqrt(units)` weights, zero bias except a forget-gate bias of 1.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_size: usize,
        units: usize,
        rng: &mut R,
    ) -> Self {
        let limit = 1.0 / (units as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::lit(dist.sample(rng))).collect() };
        let w = draw(input_size * 4 * units);
        let u = draw(units * 4 * units);
        let mut b = vec![T::zero(); 4 * units];
        b[units..2 * units].iter_mut().for_each(|v| *v = T::one());
        let input_kernel = store.add(
            format!("{name}.input_kernel"),
            Tensor::from_vec(&[input_size, 4 * units], w).expect("shape"),
            0.0,
        );
        let recurrent_kernel = store.add(
            format!("{name}.recurrent_kernel"),
            Tensor::from_vec(&[units, 4 * units], u).expect("shape"),
            0.0,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::from_vec(&[4 * units], b).expect("shape"), 0.0);
        Self {
            input_kernel,
            recurrent_kernel,
            bias,
            input_size,
            units,
        }
    }

    pub fn parameter_count(&self) -> usize {
        4 * self.units * (self.input_size + self.units + 1)
    }

    /// Runs the recurrence over `inputs` (each `[batch, input_size]`).
    ///
    /// `step_masks[t][b]` is 1 where step `t` of sequence `b` is real data and 0
    /// for padding; padded steps carry the previous state through unchanged,
    /// so the final state of each row is the state at its last real step.
    /// In training mode a single recurrent-dropout mask is drawn per call and
    /// applied to the hidden state feeding every step.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &[Var],
        step_masks: Option<&[Vec<T>]>,
        recurrent_dropout: f64,
        return_sequences: bool,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        let Some(&first) = inputs.first() else {
            bail!(Argument, "LSTM input sequence is empty");
        };
        if !(0.0..1.0).contains(&recurrent_dropout) {
            bail!(Argument, "recurrent dropout must lie in [0, 1), got {}", recurrent_dropout);
        }
        if let Some(m) = step_masks {
            if m.len() != inputs.len() {
                bail!(Shape, "{} step masks for {} steps", m.len(), inputs.len());
            }
        }
        let batch = g.shape(first)[0];
        for &x in inputs {
            if g.shape(x) != [batch, self.input_size] {
                bail!(
                    Shape,
                    "LSTM step input {:?} does not match [{}, {}]",
                    g.shape(x),
                    batch,
                    self.input_size
                );
            }
        }
        let u = self.units;
        let w = g.param(store, self.input_kernel);
        let rk = g.param(store, self.recurrent_kernel);
        let b = g.param(store, self.bias);

        let dropout_mask = if mode == Mode::Train && recurrent_dropout > 0.0 {
            let scale = 1.0 / (1.0 - recurrent_dropout);
            let data = (0..batch * u)
                .map(|_| {
                    if rng.gen::<f64>() < recurrent_dropout {
                        T::zero()
                    } else {
                        T::lit(scale)
                    }
                })
                .collect();
            Some(g.constant(Tensor::from_vec(&[batch, u], data)?))
        } else {
            None
        };

        let mut h = g.constant(Tensor::zeros(&[batch, u]));
        let mut c = g.constant(Tensor::zeros(&[batch, u]));
        let mut outputs = Vec::with_capacity(inputs.len());
        for (t, &x) in inputs.iter().enumerate() {
            let h_in = match dropout_mask {
                Some(m) => g.mul(h, m)?,
                None => h,
            };
            let zx = g.affine(x, w, Some(b))?;
            let zh = g.matmul(h_in, rk)?;
            let z = g.add(zx, zh)?;
            let zi = g.slice_cols(z, 0, u)?;
            let zf = g.slice_cols(z, u, u)?;
            let zc = g.slice_cols(z, 2 * u, u)?;
            let zo = g.slice_cols(z, 3 * u, u)?;
            let i_gate = g.sigmoid(zi);
            let f_gate = g.sigmoid(zf);
            let cand = g.tanh(zc);
            let o_gate = g.sigmoid(zo);
            let keep = g.mul(f_gate, c)?;
            let write = g.mul(i_gate, cand)?;
            let c_new = g.add(keep, write)?;
            let c_act = g.tanh(c_new);
            let h_new = g.mul(o_gate, c_act)?;
            match step_masks {
                Some(masks) => {
                    c = g.row_blend(c_new, c, masks[t].clone())?;
                    h = g.row_blend(h_new, h, masks[t].clone())?;
                }
                None => {
                    c = c_new;
                    h = h_new;
                }
            }
            if return_sequences {
                outputs.push(h);
            }
        }
        if !return_sequences {
            outputs.push(h);
        }
        Ok(outputs)
    }
}
