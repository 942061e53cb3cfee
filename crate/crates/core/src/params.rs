//! Named parameter storage and per-pass binding onto a tape.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{KgcmError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// All learnable (and a few fixed) arrays of a model, keyed by dotted name.
/// Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| KgcmError::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| KgcmError::Config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Glorot-uniform `rows x cols` matrix.
    pub fn init_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut SeededRng) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.uniform_in(-limit, limit))
            .collect();
        self.insert(name, Tensor::from_parts(vec![rows, cols], data));
    }

    pub fn init_normal(&mut self, name: &str, dims: &[usize], std: f64, rng: &mut SeededRng) {
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.normal(0.0, std)).collect();
        self.insert(name, Tensor::from_parts(dims.to_vec(), data));
    }

    pub fn init_constant(&mut self, name: &str, dims: &[usize], value: f64) {
        self.insert(name, Tensor::filled(dims, value));
    }
}

/// Registers parameters on a tape on first use and remembers their handles,
/// so each parameter appears as exactly one leaf per pass.
pub struct Binder<'p> {
    params: &'p ModelParams,
    trainable: Option<&'p dyn Fn(&str) -> bool>,
    bound: BTreeMap<String, Var>,
}

impl<'p> Binder<'p> {
    /// `trainable` decides which names become `requires_grad` leaves; `None`
    /// binds everything as constants (inference).
    pub fn new(params: &'p ModelParams, trainable: Option<&'p dyn Fn(&str) -> bool>) -> Self {
        Self {
            params,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let requires_grad = self.trainable.is_some_and(|f| f(name));
        let v = tape.leaf(self.params.get(name)?.clone(), requires_grad)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `var` for `name` instead of a fresh leaf. Lets a caller own the
    /// leaf of one parameter, e.g. to probe it numerically.
    pub fn bind_as(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Collects the gradients of every bound trainable parameter by name.
    pub fn collect(&self, mut grads: Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}
