//! Adaptive-moment gradient ascent with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One ascent step on the coordinates where `mask` is true (all when
    /// `None`). Masked-out coordinates are left bit-identical, including
    /// their moments and weight decay.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig, mask: Option<&[bool]>) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape { expected: self.m.len(), got: grad.len() });
        }
        if mask.is_some_and(|m| m.len() != self.m.len()) {
            return Err(Error::Shape { expected: self.m.len(), got: mask.map_or(0, |m| m.len()) });
        }
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] += lr * mhat / (vhat.sqrt() + cfg.eps);
            params[i] -= lr * cfg.weight_decay * params[i];
        }
        Ok(())
    }
}
