use super::{Real, Tensor};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a model. Trainable parameters carry a gradient
/// buffer; non-trainable ones (batch-norm running statistics) do not take
/// part in optimization but are persisted with the rest.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub l2_coefficient: f64,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, l2_coefficient: f64) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            l2_coefficient,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(&[0]),
            l2_coefficient: 0.0,
            trainable: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            p.grad.fill_zero();
        }
    }

    /// Every tensor as `(name, shape, values)` in insertion order, widened to f64.
    pub fn to_named_arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.to_f64()))
            .collect()
    }

    /// Overwrites values from named arrays. Every parameter must be present with a matching shape.
    pub fn load_named_arrays(&mut self, arrays: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for p in &mut self.params {
            let Some((_, shape, data)) = arrays.iter().find(|(n, _, _)| *n == p.name) else {
                bail!(Format, "missing parameter array '{}'", p.name);
            };
            if shape.as_slice() != p.value.shape() {
                bail!(
                    Shape,
                    "parameter '{}' has shape {:?}, stored {:?}",
                    p.name,
                    p.value.shape(),
                    shape
                );
            }
            p.value = Tensor::from_f64(shape, data)?;
        }
        Ok(())
    }

    /// Snapshot of all values, used to restore the best epoch.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }
}
