//! Adam with the canonical moment decays.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::networks::ModelWeights;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moments, one tensor per parameter in `ModelWeights::groups` order.
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, weights: &ModelWeights) -> Self {
        let zeros: Vec<Tensor> = weights
            .groups()
            .into_iter()
            .flat_map(|g| g.tensors.iter())
            .map(|t| Tensor::zeros(t.raw_dim()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One update; `grads` follows the same parameter order as the moments.
    pub fn update(&mut self, weights: &mut ModelWeights, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.first.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let params = weights
            .groups_mut()
            .into_iter()
            .flat_map(|g| g.tensors.iter_mut());
        for (((p, g), m), v) in params
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
