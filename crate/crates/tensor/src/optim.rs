use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.95;

/// AdamW with bias correction and decoupled, multiplicative weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.first.get(name)?.as_slice(), self.second.get(name)?.as_slice()))
    }

    /// Restores saved state (used when resuming from a checkpoint).
    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>) {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (name, (m, v)) in moments {
            self.first.insert(name.clone(), m);
            self.second.insert(name, v);
        }
    }

    pub fn state(&self) -> impl Iterator<Item = (&String, &Vec<f64>, &Vec<f64>)> {
        self.first.iter().map(|(k, m)| (k, m, &self.second[k]))
    }

    /// Applies one update to every trainable parameter. A trainable
    /// parameter without a gradient is treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param) in store.iter_mut() {
            if !param.requires_grad() {
                continue;
            }
            let n = param.numel();
            let grad = param.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: param.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
            let decay = 1.0 - self.lr * self.weight_decay;
            let data = param.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
