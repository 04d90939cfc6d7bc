//! Named, swappable parameter slots shared between modules and the optimizer.

use std::sync::{Arc, RwLock};

use patchsum_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config, Result};

#[derive(Debug)]
struct Slot {
    name: String,
    decay: bool,
    value: RwLock<Tensor>,
}

/// Handle to one trainable tensor. Forward passes read the current leaf;
/// the optimizer swaps in a fresh leaf after each update.
#[derive(Debug, Clone)]
pub struct Param(Arc<Slot>);

impl Param {
    pub fn get(&self) -> Tensor {
        self.0.value.read().expect("param lock").clone()
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    /// Whether decoupled weight decay applies (matrices yes, biases and gains no).
    pub fn decays(&self) -> bool {
        self.0.decay
    }

    pub fn shape(&self) -> Vec<usize> {
        self.get().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.get().numel()
    }

    /// Replaces the value with a new gradient-tracking leaf.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let fresh = Tensor::param(self.shape(), data)?;
        *self.0.value.write().expect("param lock") = fresh;
        Ok(())
    }

    pub fn set_tensor(&self, t: Tensor) {
        *self.0.value.write().expect("param lock") = t;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.get().grad()
    }

    pub fn zero_grad(&self) {
        self.get().zero_grad();
    }
}

/// Ordered registry of every parameter of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Param::zero_grad);
    }

    /// Snapshot of every value, in registration order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.get().data().to_vec()).collect()
    }
}

/// Creates parameters with a shared RNG and records them in a store.
pub struct ParamBuilder<'a, R: Rng> {
    rng: &'a mut R,
    std: f64,
    store: ParamStore,
    prefix: Vec<String>,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(rng: &'a mut R, std: f64) -> Self {
        Self { rng, std, store: ParamStore::default(), prefix: Vec::new() }
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn register(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, decay: bool) -> Result<Param> {
        let full = self.full_name(name);
        if self.store.get(&full).is_some() {
            return Err(config(format!("duplicate parameter name '{full}'")));
        }
        let p = Param(Arc::new(Slot { name: full, decay, value: RwLock::new(Tensor::param(shape, data)?) }));
        self.store.params.push(p.clone());
        Ok(p)
    }

    /// Gaussian-initialized matrix or embedding table.
    pub fn normal(&mut self, name: &str, shape: Vec<usize>) -> Result<Param> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, self.std).map_err(|e| config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.register(name, shape, data, true)
    }

    pub fn filled(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<Param> {
        let n = shape.iter().product();
        self.register(name, shape, vec![value; n], false)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}
