//! AdamW with decoupled weight decay.

use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(param_count: usize, cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    /// Update all parameters.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        let range = 0..params.len();
        self.step_range(params, grads, lr, range);
    }

    /// Update only `range`; parameters (and moments) outside it are left
    /// bit-identical. Weight decay is decoupled, so it too applies only
    /// inside the range.
    pub fn step_range(&mut self, params: &mut [f64], grads: &[f64], lr: f64, range: Range<usize>) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for i in range {
            let g = grads[i];
            self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * g;
            self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * params[i]);
        }
    }
}
