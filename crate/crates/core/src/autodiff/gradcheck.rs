use super::{Graph, ParamStore, Var};
use crate::error::Result;

/// Denominator floor for the element-wise relative error, so that entries
/// whose true gradient is essentially zero are judged on absolute error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub elements: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_relative_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockError> {
        self.blocks
            .iter()
            .filter(|b| b.max_relative_error >= self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares analytic gradients of every trainable tensor in `store` against
/// central finite differences of `loss_fn`.
///
/// `loss_fn` must rebuild the same computation on each call; any randomness
/// (dropout masks) has to be re-seeded inside it.
pub fn gradient_check<F>(
    store: &mut ParamStore<f64>,
    mut loss_fn: F,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    store.zero_grads();
    g.accumulate_param_grads(store);

    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut blocks = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.get(id).grad.data().to_vec();
        let mut worst = (0.0_f64, 0usize);
        for k in 0..analytic.len() {
            let original = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = original + epsilon;
            let plus = eval(&mut loss_fn, store)?;
            store.get_mut(id).value.data_mut()[k] = original - epsilon;
            let minus = eval(&mut loss_fn, store)?;
            store.get_mut(id).value.data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[k], numeric);
            if err > worst.0 {
                worst = (err, k);
            }
        }
        blocks.push(BlockError {
            name: store.get(id).name.clone(),
            elements: analytic.len(),
            max_relative_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        blocks,
    })
}

fn eval<F>(loss_fn: &mut F, store: &ParamStore<f64>) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    Ok(g.value(loss).data()[0])
}
