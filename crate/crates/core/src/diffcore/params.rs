use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

/// Handle to one named array inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All trainable arrays of a model, each with a gradient slot of identical shape.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        ensure!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    /// Glorot-uniform matrix: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Add a backward pass's gradients into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (slot, g) in self.grads.iter_mut().zip(&grads.per_param) {
            if let Some(g) = g {
                slot.add_assign(g);
            }
        }
    }

    /// Replace a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        ensure!(
            value.shape() == self.values[id.0].shape(),
            "parameter {:?} has shape {:?}, got {:?}",
            self.names[id.0],
            self.values[id.0].shape(),
            value.shape()
        );
        self.values[id.0] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub(crate) per_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn empty(n: usize) -> Self {
        Gradients {
            per_param: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.per_param[id.0].as_ref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.per_param[id.0].as_mut()
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (a, b) in self.per_param.iter_mut().zip(&other.per_param) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
}
