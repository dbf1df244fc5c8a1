use std::collections::BTreeMap;

use crate::error::{DiffError, Result};
use crate::store::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam. Moments are keyed by parameter name and created lazily.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter in `store`. Every parameter must
    /// carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(DiffError::MissingGrad(name.clone()));
        }
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (name, t) in store.iter_mut() {
            let n = t.len();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n {
                return Err(DiffError::Shape {
                    op: "adam",
                    detail: format!("moment for `{name}` has {} entries, param {n}", m.len()),
                });
            }
            let g = t.grad().expect("checked above").to_vec();
            for (i, p) in t.values_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(theta: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::scalar(theta);
        t.set_grad(vec![grad]).unwrap();
        s.insert("theta", t);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 0.5, v̂ = 0.25, update = 1e-3 * 0.5 / (0.5 + 1e-8)
        let mut s = single(1.0, 0.5);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        let theta = s.get("theta").unwrap().values()[0];
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((theta - expected).abs() < 1e-15);
        assert!((theta - 0.999).abs() < 1e-10);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_theta() {
        let mut s = single(1.0, 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(s.get("theta").unwrap().values()[0], 1.0);
    }

    #[test]
    fn missing_grad_names_the_parameter() {
        let mut s = ParamStore::new();
        s.insert("layer.w", Tensor::scalar(1.0));
        let err = Adam::new(AdamConfig::default()).step(&mut s).unwrap_err();
        assert_eq!(err, DiffError::MissingGrad("layer.w".into()));
        assert!(err.to_string().contains("layer.w"));
    }
}
