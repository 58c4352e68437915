use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{MarnError, Result};
use crate::tensor::{Real, Tensor};

/// Index of a trainable array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamId {
    /// The graph leaf bound to this parameter by [`ParamStore::bind`].
    #[inline]
    pub fn of(self, vars: &[Var]) -> Var {
        vars[self.0]
    }
}

/// Named, ordered collection of trainable arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(MarnError::Shape(format!(
                "{}: expected {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Registers every parameter as a trainable leaf, in store order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
