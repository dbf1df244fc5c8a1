use std::collections::BTreeMap;

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

/// Named parameters, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            let n = t.len();
            t.set_grad(vec![0.0; n]).expect("length matches");
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }

    /// Euclidean norm of all gradients (missing grads count as zero).
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in self.params.values_mut() {
                if let Some(g) = t.grad() {
                    let scaled: Vec<f64> = g.iter().map(|v| v * s).collect();
                    t.set_grad(scaled).expect("length matches");
                }
            }
        }
        norm
    }

    /// Copies values for every name present in both stores with equal shape.
    /// Returns the names that were copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> Vec<String> {
        let mut copied = Vec::new();
        for (name, t) in self.params.iter_mut() {
            if let Some(src) = other.get(name) {
                if src.shape() == t.shape() {
                    t.values_mut().copy_from_slice(src.values());
                    copied.push(name.clone());
                }
            }
        }
        copied
    }

    /// Flat parameter vector in iteration order; used by finite-difference checks.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|t| t.values().iter().copied())
            .collect()
    }

    /// Flat gradient vector in iteration order (zeros where missing).
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.params.values() {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        out
    }

    /// Adds `delta` to the flat parameter vector at `index`.
    pub fn nudge(&mut self, index: usize, delta: f64) {
        let mut i = index;
        for t in self.params.values_mut() {
            if i < t.len() {
                t.values_mut()[i] += delta;
                return;
            }
            i -= t.len();
        }
        panic!("nudge index {index} out of range");
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}
