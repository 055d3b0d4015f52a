//! AdamW with decoupled weight decay and named moment slots.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorData;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v, lo, hi) in [
            ("beta1", self.beta1, 0.0, 1.0),
            ("beta2", self.beta2, 0.0, 1.0),
        ] {
            if !(v >= lo && v < hi) {
                return Err(Error::Config(format!(
                    "adamw: {name} must lie in [{lo}, {hi}), got {v}"
                )));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!(
                "adamw: eps must be positive, got {}",
                self.eps
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "adamw: weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimizer state; moment slots are keyed by parameter name and created
/// lazily so LoRA attachment mid-run would not invalidate existing slots.
pub struct AdamW {
    config: AdamWConfig,
    lr: f64,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, lr: f64) -> AdamW {
        AdamW {
            config,
            lr,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Advance the shared timestep. Call once per optimizer step, before
    /// any [`AdamW::update`] of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε), with bias-corrected moments.
    pub fn update(&mut self, name: &str, value: &mut TensorData, grad: &[f64]) -> Result<()> {
        debug_assert!(self.t > 0, "begin_step before update");
        if value.numel() != grad.len() {
            return Err(Error::Contract(format!(
                "adamw: gradient length {} does not match parameter {name} ({})",
                grad.len(),
                value.numel()
            )));
        }
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let theta = value.data_mut();
        for i in 0..grad.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= self.lr * self.config.weight_decay * theta[i]
                + self.lr * m_hat / (v_hat.sqrt() + self.config.eps);
        }
        Ok(())
    }

    /// One whole optimizer step over `(name, value, gradient)` triples.
    pub fn step(&mut self, params: Vec<(&str, &mut TensorData, &[f64])>) -> Result<()> {
        self.begin_step();
        for (name, value, grad) in params {
            self.update(name, value, grad)?;
        }
        Ok(())
    }
}
