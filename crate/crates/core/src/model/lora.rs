//! Low-rank adapters over frozen base matrices.
//!
//! A base weight W0 [d_in × d_out] gains trainable factors A [d_in × r]
//! (small random) and B [r × d_out] (zero), contributing (α/r)·x·A·B on top
//! of x·W0. Zero B makes the adapted forward equal the base forward exactly
//! at attach time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::tensor::{kernels, TensorData};

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub target: String,
    pub a: TensorData,
    pub b: TensorData,
    pub r: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }
}

pub(crate) fn a_name(target: &str) -> String {
    format!("lora.{target}.a")
}

pub(crate) fn b_name(target: &str) -> String {
    format!("lora.{target}.b")
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for byte in s.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl TransformerModel {
    /// Attach adapters to `targets` (exact parameter names). Freezes every
    /// base parameter; only the adapter factors remain trainable.
    pub fn attach_lora(&mut self, targets: &[String], r: usize, alpha: f64) -> Result<()> {
        if r == 0 || !(alpha > 0.0) {
            return Err(Error::Config(format!(
                "lora: rank and alpha must be positive, got r={r}, alpha={alpha}"
            )));
        }
        let mut new = Vec::with_capacity(targets.len());
        for target in targets {
            let param = self
                .param(target)
                .ok_or_else(|| Error::Config(format!("lora: unknown target `{target}`")))?;
            let shape = param.value.shape();
            if shape.len() != 2 {
                return Err(Error::Config(format!(
                    "lora: target `{target}` is not a matrix (shape {shape:?})"
                )));
            }
            let (d_in, d_out) = (shape[0], shape[1]);
            if r >= d_in.min(d_out) {
                return Err(Error::Config(format!(
                    "lora: rank {r} too large for `{target}` [{d_in}×{d_out}]; need r < {}",
                    d_in.min(d_out)
                )));
            }
            if self.adapters.iter().any(|a| &a.target == target) {
                return Err(Error::Config(format!(
                    "lora: target `{target}` already adapted"
                )));
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.config.seed ^ fnv1a(target) ^ (r as u64) << 17);
            let a_data: Vec<f64> = (0..d_in * r)
                .map(|_| 0.02 * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            new.push(LoraAdapter {
                target: target.clone(),
                a: TensorData::new(vec![d_in, r], a_data)?,
                b: TensorData::zeros(vec![r, d_out]),
                r,
                alpha,
            });
        }
        for p in &mut self.params {
            p.trainable = false;
        }
        self.adapters.extend(new);
        Ok(())
    }

    /// Fold every adapter into its base weight and return a plain model:
    /// W = W0 + (α/r)·A·B, adapters removed, all parameters trainable.
    pub fn merge_lora(&self) -> Result<TransformerModel> {
        if self.adapters.is_empty() {
            return Err(Error::Contract("merge_lora: no adapters attached".into()));
        }
        let mut merged = self.clone();
        for adapter in &self.adapters {
            let w = merged
                .params
                .iter_mut()
                .find(|p| p.name == adapter.target)
                .expect("adapter target exists");
            let shape = w.value.shape().to_vec();
            let (d_in, d_out) = (shape[0], shape[1]);
            let mut update = vec![0.0; d_in * d_out];
            kernels::matmul_nn_acc(
                adapter.a.data(),
                adapter.b.data(),
                &mut update,
                d_in,
                adapter.r,
                d_out,
            );
            let scale = adapter.scale();
            for (wv, u) in w.value.data_mut().iter_mut().zip(&update) {
                *wv += scale * u;
            }
        }
        merged.adapters.clear();
        for p in &mut merged.params {
            p.trainable = true;
        }
        Ok(merged)
    }
}
