//! Adam with bias correction.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Updates `params` in place from `grads`; both lists must come in the
    /// same order on every call.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[&Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| alloc::vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - crate::math::powi(beta1, self.step as i32);
        let c2 = 1.0 - crate::math::powi(beta2, self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p.data[j] -= lr * m_hat / (crate::math::sqrt(v_hat) + epsilon);
            }
        }
    }
}
