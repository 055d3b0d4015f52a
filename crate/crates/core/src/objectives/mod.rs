//! The per-token loss family: standard SFT, probability-masked ProFit (with
//! an inverse mode), detached-probability reweighting (DFT), entropy gating,
//! and multi-reference aggregation.
//!
//! Every variant composes the same per-token cross-entropy. Masks and
//! weights are computed from detached values only, so they are
//! stop-gradients by construction: the loss graph sees them as constants.

use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor, TensorData};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Above,
    Below,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Above => "above",
            Mode::Below => "below",
        })
    }
}

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_RHO: f64 = 0.2;

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_rho() -> f64 {
    DEFAULT_RHO
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Objective {
    StandardSft,
    Profit {
        #[serde(default = "default_tau")]
        tau: f64,
        #[serde(default)]
        mode: Mode,
        /// Normalize by the unmasked count instead of the full supervised
        /// length T. Off by default: the objective divides by T.
        #[serde(default)]
        unmasked_norm: bool,
    },
    Dft,
    EntropyGate {
        #[serde(default = "default_rho")]
        rho: f64,
    },
    MultiRef {
        k: usize,
        inner: Box<Objective>,
    },
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match self {
            Objective::StandardSft | Objective::Dft => Ok(()),
            Objective::Profit { tau, .. } => {
                if !(0.0..=1.0).contains(tau) {
                    return Err(Error::Config(format!(
                        "profit: tau must lie in [0, 1], got {tau}"
                    )));
                }
                Ok(())
            }
            Objective::EntropyGate { rho } => {
                if !(*rho > 0.0 && *rho <= 1.0) {
                    return Err(Error::Config(format!(
                        "entropy_gate: rho must lie in (0, 1], got {rho}"
                    )));
                }
                Ok(())
            }
            Objective::MultiRef { k, inner } => {
                if *k == 0 {
                    return Err(Error::Config("multi_ref: k must be positive".into()));
                }
                if matches!(**inner, Objective::MultiRef { .. }) {
                    return Err(Error::Config(
                        "multi_ref: nesting depth is limited to 1".into(),
                    ));
                }
                inner.validate()
            }
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Objective::StandardSft => "standard_sft",
            Objective::Profit { .. } => "profit",
            Objective::Dft => "dft",
            Objective::EntropyGate { .. } => "entropy_gate",
            Objective::MultiRef { .. } => "multi_ref",
        }
    }
}

/// Per-position record of everything the objective saw and decided.
#[derive(Debug, Clone)]
pub struct TokenDiag {
    pub seq: usize,
    pub pos: usize,
    pub token_id: usize,
    /// False on prompt and padding positions, whose other fields are inert.
    pub supervised: bool,
    pub p: f64,
    pub entropy: f64,
    pub mask: bool,
    /// Un-normalized per-token weight (1 for selected positions, sg(p) for
    /// DFT); the row normalizer is not folded in.
    pub weight: f64,
    pub loss: f64,
}

/// A composed batch loss plus everything the trainer needs around it.
#[derive(Debug)]
pub struct LossOutput {
    /// Normalized scalar loss (graph node).
    pub loss: Tensor,
    /// Un-normalized numerator Σ w_t·ℓ_t; accumulation windows sum these
    /// and divide by the summed `norm_count` so accumulation equals one
    /// larger batch.
    pub sum_loss: Tensor,
    pub norm_count: f64,
    /// Final per-position coefficients of `sum_loss`, row-major [B·T].
    pub weights: Vec<f64>,
    /// Positions with a strictly positive coefficient.
    pub active_positions: usize,
    /// True when no position contributes: the optimizer must skip the step.
    pub skip: bool,
    pub diagnostics: Vec<TokenDiag>,
}

/// Eq.-style binary validity mask over detached probabilities: strict
/// inequality, so p = τ is excluded in both modes.
pub fn profit_mask(p: &TensorData, tau: f64, mode: Mode) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!(
            "profit_mask: tau must lie in [0, 1], got {tau}"
        )));
    }
    Ok(p.data()
        .iter()
        .map(|&pt| match mode {
            Mode::Above => pt > tau,
            Mode::Below => pt < tau,
        })
        .collect())
}

/// Top-⌈ρN⌉ supervised positions by row entropy, ties broken by
/// (sequence, position) ascending.
pub fn entropy_gate_mask(probs: &TensorData, batch: &TokenBatch, rho: f64) -> Result<Vec<bool>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!(
            "entropy_gate_mask: rho must lie in (0, 1], got {rho}"
        )));
    }
    let (b, t) = (batch.batch_size(), batch.seq_len());
    let v = probs.last_dim();
    if probs.shape() != [b, t, v] || probs.numel() != b * t * v {
        return Err(Error::Contract(format!(
            "entropy_gate_mask: probs shape {:?} does not match batch [{b}×{t}]",
            probs.shape()
        )));
    }
    let entropies: Vec<f64> = probs
        .data()
        .chunks(v)
        .map(kernels::row_entropy)
        .collect();
    Ok(select_top_entropy(&entropies, batch, rho))
}

fn select_top_entropy(entropies: &[f64], batch: &TokenBatch, rho: f64) -> Vec<bool> {
    let (b, t) = (batch.batch_size(), batch.seq_len());
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for bi in 0..b {
        for ti in 0..t {
            if batch.supervised(bi, ti) {
                candidates.push((bi, ti));
            }
        }
    }
    let n = candidates.len();
    let keep = ((rho * n as f64).ceil() as usize).clamp(1, n.max(1));
    candidates.sort_by(|&(b1, t1), &(b2, t2)| {
        let h1 = entropies[b1 * t + t1];
        let h2 = entropies[b2 * t + t2];
        h2.partial_cmp(&h1)
            .expect("finite entropies")
            .then(b1.cmp(&b2))
            .then(t1.cmp(&t2))
    });
    let mut mask = vec![false; b * t];
    for &(bi, ti) in candidates.iter().take(keep) {
        mask[bi * t + ti] = true;
    }
    mask
}

/// Tape-free per-row cross-entropy values, for finite-difference oracles.
pub fn token_losses(logits: &TensorData, labels: &[usize]) -> Result<Vec<f64>> {
    let v = logits.last_dim();
    let rows = logits.numel() / v;
    if labels.len() != rows {
        return Err(Error::Contract(format!(
            "token_losses: {} labels for {rows} rows",
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(rows);
    for (r, row) in logits.data().chunks(v).enumerate() {
        if labels[r] >= v {
            return Err(Error::Index(format!(
                "token_losses: label {} out of range at row {r}",
                labels[r]
            )));
        }
        out.push(kernels::log_sum_exp(row) - row[labels[r]]);
    }
    Ok(out)
}

/// Σ weights·ℓ over the batch with an explicit normalizer. This is the one
/// place loss graphs are assembled, so any two weight grids that agree
/// numerically yield bitwise-identical losses and gradients.
pub fn weighted_ce_loss(
    logits: &Tensor,
    labels: &[usize],
    weights: &[f64],
    norm_count: f64,
) -> Result<(Tensor, Tensor)> {
    let ce = logits.cross_entropy(labels)?;
    let shape = ce.shape();
    let wt = logits
        .tape()
        .constant(TensorData::new(shape, weights.to_vec())?);
    let sum_loss = ce.mul(&wt)?.sum();
    let loss = sum_loss.scale(1.0 / norm_count);
    Ok((loss, sum_loss))
}

/// Compose `objective` over logits [B×T×V] and a collated batch.
/// Multi-reference objectives need [`multi_ref_loss`] instead.
pub fn compose_loss(
    objective: &Objective,
    logits: &Tensor,
    batch: &TokenBatch,
) -> Result<LossOutput> {
    objective.validate()?;
    let (b, t) = (batch.batch_size(), batch.seq_len());
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != b || shape[1] != t {
        return Err(Error::Shape {
            op: "compose_loss",
            lhs: shape,
            rhs: vec![b, t],
        });
    }
    let v = shape[2];
    let labels = batch.flat_labels();
    let logits_val = logits.value();

    // Detached diagnostics: per-position loss, target probability, entropy.
    let losses = token_losses(&logits_val, &labels)?;
    let mut p_grid = vec![0.0; b * t];
    for bi in 0..b {
        for ti in 0..t {
            if !batch.pad_mask[bi][ti] {
                p_grid[bi * t + ti] = (-losses[bi * t + ti]).exp();
            }
        }
    }
    let entropies: Vec<f64> = logits_val
        .data()
        .chunks(v)
        .map(|row| {
            let mut probs = row.to_vec();
            kernels::softmax_row_inplace(&mut probs);
            kernels::row_entropy(&probs)
        })
        .collect();

    let mut weights = vec![0.0; b * t];
    let mut unit_weights = vec![0.0; b * t];
    let mut mask = vec![false; b * t];
    let norm_count: f64;
    match objective {
        Objective::StandardSft => {
            for bi in 0..b {
                for ti in 0..t {
                    if batch.supervised(bi, ti) {
                        mask[bi * t + ti] = true;
                        unit_weights[bi * t + ti] = 1.0;
                        weights[bi * t + ti] = 1.0 / batch.t_b[bi] as f64;
                    }
                }
            }
            norm_count = b as f64;
        }
        Objective::Profit {
            tau,
            mode,
            unmasked_norm,
        } => {
            let p_tensor = TensorData::new(vec![b, t], p_grid.clone())?;
            let m = profit_mask(&p_tensor, *tau, *mode)?;
            for bi in 0..b {
                let selected: Vec<usize> = (0..t)
                    .filter(|&ti| batch.supervised(bi, ti) && m[bi * t + ti])
                    .collect();
                let denom = if *unmasked_norm {
                    selected.len() as f64
                } else {
                    batch.t_b[bi] as f64
                };
                for ti in selected {
                    mask[bi * t + ti] = true;
                    unit_weights[bi * t + ti] = 1.0;
                    weights[bi * t + ti] = 1.0 / denom;
                }
            }
            norm_count = b as f64;
        }
        Objective::Dft => {
            for bi in 0..b {
                for ti in 0..t {
                    if batch.supervised(bi, ti) {
                        let p = p_grid[bi * t + ti];
                        mask[bi * t + ti] = true;
                        unit_weights[bi * t + ti] = p;
                        weights[bi * t + ti] = p / batch.t_b[bi] as f64;
                    }
                }
            }
            norm_count = b as f64;
        }
        Objective::EntropyGate { rho } => {
            let selected = select_top_entropy(&entropies, batch, *rho);
            let mut count = 0usize;
            for (i, &sel) in selected.iter().enumerate() {
                if sel {
                    mask[i] = true;
                    unit_weights[i] = 1.0;
                    weights[i] = 1.0;
                    count += 1;
                }
            }
            norm_count = count as f64;
        }
        Objective::MultiRef { .. } => {
            return Err(Error::Contract(
                "compose_loss: multi-reference objectives go through multi_ref_loss".into(),
            ));
        }
    }

    let (loss, sum_loss) = weighted_ce_loss(logits, &labels, &weights, norm_count)?;
    let active_positions = weights.iter().filter(|&&w| w > 0.0).count();
    let diagnostics = (0..b * t)
        .map(|i| TokenDiag {
            seq: i / t,
            pos: i % t,
            token_id: labels[i],
            supervised: batch.supervised(i / t, i % t),
            p: p_grid[i],
            entropy: entropies[i],
            mask: mask[i],
            weight: unit_weights[i],
            loss: losses[i],
        })
        .collect();
    Ok(LossOutput {
        loss,
        sum_loss,
        norm_count,
        weights,
        active_positions,
        skip: active_positions == 0,
        diagnostics,
    })
}

/// Mean of the inner objective over K aligned reference batches.
///
/// The mean is computed as L₁ + (Σ_{k>1}(L_k − L₁))/K so that K identical
/// references reproduce the K=1 loss exactly, not merely approximately.
pub fn multi_ref_loss(
    objective: &Objective,
    logits_per_ref: &[Tensor],
    batches_per_ref: &[TokenBatch],
) -> Result<LossOutput> {
    let Objective::MultiRef { k, inner } = objective else {
        return Err(Error::Contract(
            "multi_ref_loss: objective must be multi_ref".into(),
        ));
    };
    objective.validate()?;
    if logits_per_ref.len() != *k || batches_per_ref.len() != *k {
        return Err(Error::Contract(format!(
            "multi_ref_loss: expected {k} reference batches, got {} logits / {} batches",
            logits_per_ref.len(),
            batches_per_ref.len()
        )));
    }
    let groups = batches_per_ref[0].batch_size();
    if batches_per_ref.iter().any(|bt| bt.batch_size() != groups) {
        return Err(Error::Contract(
            "multi_ref_loss: reference batches disagree on group count".into(),
        ));
    }
    let mut outs = Vec::with_capacity(*k);
    for (logits, batch) in logits_per_ref.iter().zip(batches_per_ref) {
        outs.push(compose_loss(inner, logits, batch)?);
    }
    if *k == 1 {
        return Ok(outs.pop().expect("one reference"));
    }
    let base = outs[0].loss.clone();
    let mut diff_sum = outs[1].loss.sub(&base)?;
    for out in &outs[2..] {
        diff_sum = diff_sum.add(&out.loss.sub(&base)?)?;
    }
    let loss = base.add(&diff_sum.scale(1.0 / *k as f64))?;
    let sum_loss = loss.scale(groups as f64);
    let active_positions: usize = outs.iter().map(|o| o.active_positions).sum();
    let mut weights = Vec::new();
    let mut diagnostics = Vec::new();
    for (ri, out) in outs.iter().enumerate() {
        weights.extend_from_slice(&out.weights);
        diagnostics.extend(out.diagnostics.iter().cloned().map(|mut d| {
            d.seq += ri * groups;
            d
        }));
    }
    Ok(LossOutput {
        loss,
        sum_loss,
        norm_count: groups as f64,
        weights,
        active_positions,
        skip: active_positions == 0,
        diagnostics,
    })
}

/// CSV header for diagnostic dumps.
pub const DIAGNOSTICS_HEADER: &str = "step,seq,pos,token_id,p,entropy,mask,weight,loss";

pub fn diagnostics_csv_rows(step: u64, diags: &[TokenDiag]) -> String {
    let mut out = String::new();
    for d in diags {
        out.push_str(&format!(
            "{step},{},{},{},{},{},{},{},{}\n",
            d.seq,
            d.pos,
            d.token_id,
            d.p,
            d.entropy,
            d.mask as u8,
            d.weight,
            d.loss
        ));
    }
    out
}
