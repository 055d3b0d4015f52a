//! Executable checks of the gradient identities behind probability masking:
//! the softmax-CE logit gradient p − e_y, the norm inequality
//! ∥∇_z ℓ∥₂ ≥ 1 − p, and the parameter-space lower bound
//! ∥∇_θ ℓ∥₂ ≥ σ_min(J)·(1 − p) on explicit Jacobians of tiny models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{init_model, Forward, ModelConfig, TransformerModel};
use crate::tensor::{kernels, Tape, TensorData};

/// Largest V·P Jacobian the explicit construction will attempt.
pub const JACOBIAN_BUDGET: usize = 10_000_000;

/// σ_min at or below this is treated as a failed full-row-rank assumption.
pub const RANK_ASSUMPTION_FLOOR: f64 = 1e-10;

/// Accumulated-rounding allowance on both slack checks.
pub const SLACK_TOLERANCE: f64 = -1e-9;

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub position: usize,
    pub p: f64,
    pub logit_grad_norm: f64,
    pub param_grad_norm: f64,
    pub sigma_min: f64,
    pub slack_logit: f64,
    pub slack_param: f64,
    pub assumption_ok: bool,
}

impl BoundReport {
    pub fn verdict(&self) -> &'static str {
        if !self.assumption_ok {
            "assumption violated"
        } else if self.slack_param >= SLACK_TOLERANCE {
            "bound holds"
        } else {
            "bound violated"
        }
    }
}

/// The parameter subset Jacobian studies default to.
pub fn default_subset() -> Vec<String> {
    vec!["output.proj".to_string()]
}

/// Closed-form ∇_z ℓ = softmax(z) − e_target and its norm bound 1 − p.
pub fn logit_grad_norm_check(logits_row: &TensorData, target: usize) -> Result<BoundReport> {
    let v = logits_row.numel();
    if logits_row.shape().len() != 1 {
        return Err(Error::Contract(format!(
            "logit_grad_norm_check: expected a rank-1 row, got shape {:?}",
            logits_row.shape()
        )));
    }
    if target >= v {
        return Err(Error::Index(format!(
            "logit_grad_norm_check: target {target} out of range for V={v}"
        )));
    }
    let mut probs = logits_row.data().to_vec();
    kernels::softmax_row_inplace(&mut probs);
    let p = probs[target];
    let mut norm_sq = 0.0;
    for (i, &pi) in probs.iter().enumerate() {
        let g = if i == target { pi - 1.0 } else { pi };
        norm_sq += g * g;
    }
    let logit_grad_norm = norm_sq.sqrt();
    let slack_logit = logit_grad_norm - (1.0 - p);
    assert!(
        slack_logit >= SLACK_TOLERANCE,
        "logit gradient norm {logit_grad_norm} under 1 - p = {}",
        1.0 - p
    );
    Ok(BoundReport {
        position: 0,
        p,
        logit_grad_norm,
        param_grad_norm: 0.0,
        sigma_min: 0.0,
        slack_logit,
        slack_param: 0.0,
        assumption_ok: true,
    })
}

fn subset_sizes(model: &TransformerModel, subset: &[String]) -> Result<usize> {
    let mut total = 0;
    for name in subset {
        let param = model
            .params
            .iter()
            .find(|p| p.name == *name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?} in subset")))?;
        if !param.trainable {
            return Err(Error::Contract(format!(
                "parameter {name:?} is frozen; Jacobian study needs gradients"
            )));
        }
        total += param.value.numel();
    }
    Ok(total)
}

fn collect_subset_grads(bound: &[(String, crate::tensor::Tensor)], subset: &[String]) -> Vec<f64> {
    let mut flat = Vec::new();
    for name in subset {
        let (_, leaf) = bound
            .iter()
            .find(|(n, _)| n == name)
            .expect("subset validated against bound parameters");
        let grad = leaf.grad().expect("trainable leaf has a gradient slot");
        flat.extend_from_slice(grad.data());
    }
    flat
}

/// Row v = ∂z_v/∂θ_subset at one (sequence, position), via V backward
/// passes seeded with unit cotangents. `remap` optionally rewires the
/// logit axis first (used to build rank-deficient negative controls).
fn jacobian_at(
    model: &TransformerModel,
    batch: &TokenBatch,
    position: (usize, usize),
    subset: &[String],
    remap: Option<&[usize]>,
) -> Result<(TensorData, Forward, Tape)> {
    let p_total = subset_sizes(model, subset)?;
    let v = model.config.vocab_size;
    if v * p_total > JACOBIAN_BUDGET {
        return Err(Error::Resource(format!(
            "explicit Jacobian needs {v}×{p_total} entries, over the {JACOBIAN_BUDGET} budget; \
             restrict the parameter subset"
        )));
    }
    let (b, t) = position;
    if b >= batch.batch_size() || t >= batch.seq_len() {
        return Err(Error::Index(format!(
            "position ({b}, {t}) outside batch [{}×{}]",
            batch.batch_size(),
            batch.seq_len()
        )));
    }
    let tape = Tape::new();
    let fwd = model.forward(&tape, batch)?;
    let logits = match remap {
        None => fwd.logits.clone(),
        Some(map) => fwd.logits.remap_last_axis(map)?,
    };
    let mut rows = Vec::with_capacity(v * p_total);
    for vi in 0..v {
        tape.zero_grads();
        logits.at(&[b, t, vi])?.backward()?;
        rows.extend(collect_subset_grads(&fwd.bound, subset));
    }
    tape.zero_grads();
    Ok((TensorData::new(vec![v, p_total], rows)?, fwd, tape))
}

/// Explicit J_θ(z) for one position, rows indexed by logit.
pub fn logits_jacobian(
    model: &TransformerModel,
    batch: &TokenBatch,
    position: (usize, usize),
    subset: &[String],
) -> Result<TensorData> {
    Ok(jacobian_at(model, batch, position, subset, None)?.0)
}

/// Smallest singular value of J [V×P] via the V×V Gram matrix J·Jᵀ and a
/// cyclic Jacobi eigen-decomposition. V > P cannot be full row-rank, so
/// it reports 0 outright.
pub fn sigma_min(j: &TensorData) -> Result<f64> {
    let shape = j.shape();
    if shape.len() != 2 {
        return Err(Error::Contract(format!(
            "sigma_min: expected a matrix, got shape {shape:?}"
        )));
    }
    if j.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("sigma_min: non-finite Jacobian entry".into()));
    }
    let (v, p) = (shape[0], shape[1]);
    if v > p {
        return Ok(0.0);
    }
    let mut gram = vec![0.0; v * v];
    kernels::matmul_nt_acc(j.data(), j.data(), &mut gram, v, p, v);
    let eigs = jacobi_eigenvalues(&mut gram, v);
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(min.max(0.0).sqrt())
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations; `a` is
/// destroyed. Convergence on the off-diagonal Frobenius norm.
fn jacobi_eigenvalues(a: &mut [f64], n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a[0]];
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let tol = 1e-28 * scale * scale;
    for _ in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= tol {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

fn study(
    model: &TransformerModel,
    batch: &TokenBatch,
    position: (usize, usize),
    subset: &[String],
    remap: Option<&[usize]>,
) -> Result<BoundReport> {
    let (j, fwd, tape) = jacobian_at(model, batch, position, subset, remap)?;
    let (b, t) = position;
    let logits_val = match remap {
        None => fwd.logits.value(),
        Some(map) => fwd.logits.remap_last_axis(map)?.value(),
    };
    let v = logits_val.last_dim();
    let tl = batch.seq_len();
    let row = &logits_val.data()[(b * tl + t) * v..(b * tl + t + 1) * v];
    let target = batch.labels[b][t];
    let row_td = TensorData::new(vec![v], row.to_vec())?;
    let logit_report = logit_grad_norm_check(&row_td, target)?;

    // Direct backward of ℓ at the position, restricted to the subset.
    tape.zero_grads();
    let logits = match remap {
        None => fwd.logits.clone(),
        Some(map) => fwd.logits.remap_last_axis(map)?,
    };
    let mut labels = vec![0; batch.batch_size() * tl];
    labels[b * tl + t] = target;
    let ce = logits.cross_entropy(&labels)?;
    ce.at(&[b, t])?.backward()?;
    let flat = collect_subset_grads(&fwd.bound, subset);
    let param_grad_norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();

    let sigma = sigma_min(&j)?;
    let slack_param = param_grad_norm - sigma * (1.0 - logit_report.p);
    Ok(BoundReport {
        position: t,
        p: logit_report.p,
        logit_grad_norm: logit_report.logit_grad_norm,
        param_grad_norm,
        sigma_min: sigma,
        slack_logit: logit_report.slack_logit,
        slack_param,
        assumption_ok: sigma > RANK_ASSUMPTION_FLOOR,
    })
}

/// Full Theorem-style study at one position: p, both gradient norms,
/// σ_min of the subset Jacobian, and the two slacks.
pub fn theorem_bound_check(
    model: &TransformerModel,
    batch: &TokenBatch,
    position: (usize, usize),
    subset: &[String],
) -> Result<BoundReport> {
    study(model, batch, position, subset, None)
}

/// Negative control: duplicate logit `dup_from` onto the last logit before
/// the study. The Jacobian then has two equal rows, σ_min = 0, and the
/// verdict must read "assumption violated" rather than "bound violated".
pub fn rank_deficient_check(
    model: &TransformerModel,
    batch: &TokenBatch,
    position: (usize, usize),
    subset: &[String],
    dup_from: usize,
) -> Result<BoundReport> {
    let v = model.config.vocab_size;
    if dup_from >= v {
        return Err(Error::Index(format!(
            "rank_deficient_check: dup_from {dup_from} out of range for V={v}"
        )));
    }
    let mut map: Vec<usize> = (0..v).collect();
    map[v - 1] = dup_from;
    study(model, batch, position, subset, Some(&map))
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub draws: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            draws: 100,
            vocab_size: 8,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            seq_len: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub draw_id: usize,
    pub v: usize,
    pub p_count: usize,
    pub report: BoundReport,
}

/// One random (model, batch, position) certification draw.
fn certification_draw(cfg: &SweepConfig, draw_id: usize) -> Result<SweepRow> {
    let seed = cfg.seed ^ (draw_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        vocab_size: cfg.vocab_size,
        d_model: cfg.d_model,
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        d_ff: cfg.d_model * 2,
        max_seq_len: cfg.seq_len,
        seed,
    };
    let model = init_model(&config)?;
    let t = cfg.seq_len;
    let ids: Vec<usize> = (0..t).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let labels: Vec<usize> = (0..t).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let batch = TokenBatch {
        input_ids: vec![ids],
        labels: vec![labels],
        prompt_mask: vec![vec![false; t]],
        pad_mask: vec![vec![false; t]],
        t_b: vec![t],
        resp_start: vec![0],
        row_sample: vec![0],
        row_ref: vec![0],
        sample_ids: vec![format!("draw{draw_id}")],
    };
    let position = (0, rng.gen_range(0..t));
    let subset = default_subset();
    let report = theorem_bound_check(&model, &batch, position, &subset)?;
    let p_count = subset_sizes(&model, &subset)?;
    Ok(SweepRow {
        draw_id,
        v: cfg.vocab_size,
        p_count,
        report,
    })
}

/// Randomized certification sweep; each draw owns its model instance.
pub fn certification_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    (0..cfg.draws).map(|d| certification_draw(cfg, d)).collect()
}

pub const SWEEP_HEADER: &str =
    "draw_id,V,P,p,logit_grad_norm,param_grad_norm,sigma_min,slack_logit,slack_param,assumption_ok";

pub fn sweep_csv_rows(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.draw_id,
            r.v,
            r.p_count,
            r.report.p,
            r.report.logit_grad_norm,
            r.report.param_grad_norm,
            r.report.sigma_min,
            r.report.slack_logit,
            r.report.slack_param,
            r.report.assumption_ok as u8
        ));
    }
    out
}
