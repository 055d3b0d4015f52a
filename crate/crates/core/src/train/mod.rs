//! Deterministic optimization loop binding model, objective, and data,
//! with gradient accumulation, checkpointing, and sweep orchestration.

mod adamw;
mod eval;
mod sweep;

pub use adamw::{AdamW, AdamWConfig};
pub use eval::{decode_greedy, evaluate, EvalMetrics};
pub use sweep::{
    rank_points, sweep, threshold_points, trajectory_points, SweepAxis, SweepInit, SweepRun,
};

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{collate, collate_multi, Sample, Vocab};
use crate::error::{Error, Result};
use crate::model::{default_lora_targets, save_checkpoint, TransformerModel};
use crate::objectives::{
    compose_loss, diagnostics_csv_rows, multi_ref_loss, LossOutput, Mode, Objective,
    DIAGNOSTICS_HEADER,
};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    /// Target suffixes resolved against parameter names; empty means the
    /// per-layer attention query/value default.
    pub targets: Vec<String>,
    pub r: usize,
    /// 0 selects the α = 2r convention.
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            targets: Vec::new(),
            r: 8,
            alpha: 0.0,
        }
    }
}

impl LoraConfig {
    pub fn effective_alpha(&self) -> f64 {
        if self.alpha > 0.0 {
            self.alpha
        } else {
            2.0 * self.r as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Micro-batches summed into each optimizer step.
    pub grad_accum: usize,
    pub epochs: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub lora: Option<LoraConfig>,
    pub eval_every_steps: usize,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::StandardSft,
            learning_rate: 0.01,
            batch_size: 1,
            grad_accum: 4,
            epochs: 1,
            grad_clip: Some(1.0),
            seed: 0,
            optimizer: AdamWConfig::default(),
            lora: None,
            eval_every_steps: 100,
            max_len: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.optimizer.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.grad_accum == 0 {
            return Err(Error::Config("grad_accum must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0 && clip.is_finite()) {
                return Err(Error::Config(format!(
                    "grad_clip must be positive when set, got {clip}"
                )));
            }
        }
        if self.eval_every_steps == 0 {
            return Err(Error::Config("eval_every_steps must be at least 1".into()));
        }
        if self.max_len < 4 {
            return Err(Error::Config(format!(
                "max_len must be at least 4, got {}",
                self.max_len
            )));
        }
        if let Some(lora) = &self.lora {
            if lora.r == 0 {
                return Err(Error::Config("lora.r must be at least 1".into()));
            }
            if !(lora.alpha >= 0.0 && lora.alpha.is_finite()) {
                return Err(Error::Config(format!(
                    "lora.alpha must be nonnegative, got {}",
                    lora.alpha
                )));
            }
        }
        Ok(())
    }

    /// Parse JSON (canonical) or a flat `key=value` file, sniffed by the
    /// first non-whitespace byte.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let trimmed = text.trim_start();
        let config = if trimmed.starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad JSON config: {e}")))?
        } else {
            Self::parse_kv(text)?
        };
        Ok(config)
    }

    fn parse_kv(text: &str) -> Result<TrainConfig> {
        let mut pairs: HashMap<&str, &str> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            pairs.insert(key.trim(), value.trim());
        }
        let mut config = TrainConfig::default();
        let mut unknown = Vec::new();
        let parse_f64 = |k: &str, v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("{k}: expected a number, got {v:?}")))
        };
        let parse_usize = |k: &str, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{k}: expected an integer, got {v:?}")))
        };
        let parse_bool = |k: &str, v: &str| -> Result<bool> {
            v.parse()
                .map_err(|_| Error::Config(format!("{k}: expected true/false, got {v:?}")))
        };
        let mut objective_tag: Option<String> = None;
        let mut tau = None;
        let mut mode = None;
        let mut unmasked_norm = None;
        let mut rho = None;
        let mut k_refs = None;
        let mut inner_tag: Option<String> = None;
        let mut lora_r = None;
        let mut lora_alpha = None;
        let mut lora_targets = None;
        for (key, value) in pairs {
            match key {
                "objective" => objective_tag = Some(value.to_string()),
                "tau" => tau = Some(parse_f64(key, value)?),
                "mode" => {
                    mode = Some(match value {
                        "above" => Mode::Above,
                        "below" => Mode::Below,
                        other => {
                            return Err(Error::Config(format!(
                                "mode: expected above|below, got {other:?}"
                            )))
                        }
                    })
                }
                "unmasked_norm" => unmasked_norm = Some(parse_bool(key, value)?),
                "rho" => rho = Some(parse_f64(key, value)?),
                "k" => k_refs = Some(parse_usize(key, value)?),
                "inner" => inner_tag = Some(value.to_string()),
                "learning_rate" => config.learning_rate = parse_f64(key, value)?,
                "batch_size" => config.batch_size = parse_usize(key, value)?,
                "grad_accum" => config.grad_accum = parse_usize(key, value)?,
                "epochs" => config.epochs = parse_usize(key, value)?,
                "grad_clip" => {
                    config.grad_clip = if value == "none" {
                        None
                    } else {
                        Some(parse_f64(key, value)?)
                    }
                }
                "seed" => {
                    config.seed = value.parse().map_err(|_| {
                        Error::Config(format!("seed: expected an integer, got {value:?}"))
                    })?
                }
                "eval_every_steps" => config.eval_every_steps = parse_usize(key, value)?,
                "max_len" => config.max_len = parse_usize(key, value)?,
                "beta1" => config.optimizer.beta1 = parse_f64(key, value)?,
                "beta2" => config.optimizer.beta2 = parse_f64(key, value)?,
                "eps" => config.optimizer.eps = parse_f64(key, value)?,
                "weight_decay" => config.optimizer.weight_decay = parse_f64(key, value)?,
                "lora_r" => lora_r = Some(parse_usize(key, value)?),
                "lora_alpha" => lora_alpha = Some(parse_f64(key, value)?),
                "lora_targets" => {
                    lora_targets = Some(
                        value
                            .split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect::<Vec<_>>(),
                    )
                }
                other => unknown.push(other.to_string()),
            }
        }
        if !unknown.is_empty() {
            unknown.sort();
            return Err(Error::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        let build_leaf = |tag: &str| -> Result<Objective> {
            Ok(match tag {
                "standard_sft" => Objective::StandardSft,
                "dft" => Objective::Dft,
                "profit" => Objective::Profit {
                    tau: tau.unwrap_or(crate::objectives::DEFAULT_TAU),
                    mode: mode.unwrap_or_default(),
                    unmasked_norm: unmasked_norm.unwrap_or(false),
                },
                "entropy_gate" => Objective::EntropyGate {
                    rho: rho.unwrap_or(crate::objectives::DEFAULT_RHO),
                },
                other => {
                    return Err(Error::Config(format!(
                        "objective: unknown tag {other:?}"
                    )))
                }
            })
        };
        if let Some(tag) = objective_tag {
            config.objective = if tag == "multi_ref" {
                Objective::MultiRef {
                    k: k_refs.ok_or_else(|| {
                        Error::Config("multi_ref objective needs k=<count>".into())
                    })?,
                    inner: Box::new(build_leaf(
                        inner_tag.as_deref().unwrap_or("standard_sft"),
                    )?),
                }
            } else {
                build_leaf(&tag)?
            };
        }
        if lora_r.is_some() || lora_alpha.is_some() || lora_targets.is_some() {
            config.lora = Some(LoraConfig {
                targets: lora_targets.unwrap_or_default(),
                r: lora_r.unwrap_or(8),
                alpha: lora_alpha.unwrap_or(0.0),
            });
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub supervised_tokens: usize,
    /// 1 − (active / supervised) over the accumulation window.
    pub masked_fraction: f64,
    /// Post-clip global gradient norm.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub windows: usize,
    pub optimizer_steps: usize,
    pub skipped_windows: usize,
}

pub const STEPS_HEADER: &str = "step,epoch,loss,supervised_tokens,masked_fraction,grad_norm";
pub const EVALS_HEADER: &str = "step,epoch,token_accuracy,answer_em,perplexity";

impl RunLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from(STEPS_HEADER);
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.step, s.epoch, s.loss, s.supervised_tokens, s.masked_fraction, s.grad_norm
            ));
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = String::from(EVALS_HEADER);
        out.push('\n');
        for e in &self.evals {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.step, e.epoch, e.metrics.token_accuracy, e.metrics.answer_em, e.metrics.perplexity
            ));
        }
        out
    }

    /// Mean fraction of supervised tokens the objective kept per step.
    pub fn mean_supervised_fraction(&self) -> Option<f64> {
        if self.steps.is_empty() {
            return None;
        }
        Some(
            self.steps
                .iter()
                .map(|s| 1.0 - s.masked_fraction)
                .sum::<f64>()
                / self.steps.len() as f64,
        )
    }
}

/// Optional sinks wired into a training run.
#[derive(Default)]
pub struct TrainIo<'a> {
    pub heldout: Option<&'a [Sample]>,
    pub checkpoint_dir: Option<&'a Path>,
    pub diagnostics: Option<&'a mut dyn Write>,
}

fn resolve_lora_targets(model: &TransformerModel, spec: &[String]) -> Result<Vec<String>> {
    if spec.is_empty() {
        return Ok(default_lora_targets(&model.config));
    }
    let mut resolved = Vec::new();
    for suffix in spec {
        let mut matched: Vec<String> = model
            .params
            .iter()
            .filter(|p| p.name == *suffix || p.name.ends_with(&format!(".{suffix}")))
            .map(|p| p.name.clone())
            .collect();
        if matched.is_empty() {
            return Err(Error::Config(format!(
                "lora target {suffix:?} matches no parameter"
            )));
        }
        resolved.append(&mut matched);
    }
    resolved.dedup();
    Ok(resolved)
}

struct WindowState {
    /// Ordered by name so norm and clip reductions sum in a fixed order.
    grads: BTreeMap<String, Vec<f64>>,
    sum_loss: f64,
    norm_count: f64,
    supervised: usize,
    active: usize,
    micro_batches: usize,
}

impl WindowState {
    fn new() -> Self {
        WindowState {
            grads: BTreeMap::new(),
            sum_loss: 0.0,
            norm_count: 0.0,
            supervised: 0,
            active: 0,
            micro_batches: 0,
        }
    }
}

fn micro_batch_loss(
    objective: &Objective,
    model: &TransformerModel,
    tape: &Tape,
    samples: &[Sample],
    vocab: &Vocab,
    max_len: usize,
) -> Result<(LossOutput, Vec<(String, crate::tensor::Tensor)>, usize)> {
    if let Objective::MultiRef { k, .. } = objective {
        let batches = collate_multi(samples, *k, vocab, max_len)?;
        let mut logits = Vec::with_capacity(batches.len());
        let mut bound = Vec::new();
        let mut supervised = 0;
        for batch in &batches {
            let fwd = model.forward(tape, batch)?;
            logits.push(fwd.logits);
            bound.extend(fwd.bound);
            supervised += batch.supervised_count();
        }
        let out = multi_ref_loss(objective, &logits, &batches)?;
        Ok((out, bound, supervised))
    } else {
        let batch = collate(samples, vocab, max_len)?;
        let fwd = model.forward(tape, &batch)?;
        let supervised = batch.supervised_count();
        let out = compose_loss(objective, &fwd.logits, &batch)?;
        Ok((out, fwd.bound, supervised))
    }
}

/// Train `model` in place; deterministic given (config, samples, seed).
pub fn train(
    config: &TrainConfig,
    model: &mut TransformerModel,
    samples: &[Sample],
    vocab: &Vocab,
    mut io: TrainIo<'_>,
) -> Result<RunLog> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("train: empty dataset".into()));
    }
    if vocab.size() != model.config.vocab_size {
        return Err(Error::Contract(format!(
            "vocabulary size {} does not match the model's {}",
            vocab.size(),
            model.config.vocab_size
        )));
    }
    if let Some(lora) = &config.lora {
        let targets = resolve_lora_targets(model, &lora.targets)?;
        model.attach_lora(&targets, lora.r, lora.effective_alpha())?;
    }
    let trainable = model.trainable_names();
    let mut opt = AdamW::new(config.optimizer, config.learning_rate);
    let mut log = RunLog::default();
    let mut step = 0usize;
    let mut last_checkpoint: Option<PathBuf> = None;
    if let Some(sink) = io.diagnostics.as_deref_mut() {
        writeln!(sink, "{DIAGNOSTICS_HEADER}")?;
    }

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);
        let micro_batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();

        for window in micro_batches.chunks(config.grad_accum) {
            let mut state = WindowState::new();
            for &micro in window {
                let chunk: Vec<Sample> = micro.iter().map(|&i| samples[i].clone()).collect();
                let tape = Tape::new();
                let (out, bound, supervised) =
                    micro_batch_loss(&config.objective, model, &tape, &chunk, vocab, config.max_len)?;
                let micro_sum = out.sum_loss.item();
                if !micro_sum.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        last_checkpoint,
                    });
                }
                if let Some(sink) = io.diagnostics.as_deref_mut() {
                    let rows: Vec<_> = out
                        .diagnostics
                        .iter()
                        .filter(|d| d.supervised)
                        .cloned()
                        .collect();
                    sink.write_all(diagnostics_csv_rows((step + 1) as u64, &rows).as_bytes())?;
                }
                state.supervised += supervised;
                state.active += out.active_positions;
                state.micro_batches += 1;
                if out.skip {
                    continue;
                }
                out.sum_loss.backward()?;
                state.sum_loss += micro_sum;
                state.norm_count += out.norm_count;
                for (name, leaf) in &bound {
                    let grad = leaf.grad().expect("trainable leaf has a gradient");
                    let slot = state
                        .grads
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; grad.numel()]);
                    for (acc, g) in slot.iter_mut().zip(grad.data()) {
                        *acc += g;
                    }
                }
            }
            log.windows += 1;
            if state.active == 0 || state.norm_count == 0.0 {
                log.skipped_windows += 1;
                continue;
            }
            // Dividing the summed gradients by the summed normalizer makes
            // the window equal one batch of all its micro-batches.
            let inv = 1.0 / state.norm_count;
            let mut norm_sq = 0.0;
            for grad in state.grads.values_mut() {
                for g in grad.iter_mut() {
                    *g *= inv;
                    norm_sq += *g * *g;
                }
            }
            let mut grad_norm = norm_sq.sqrt();
            if !grad_norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    last_checkpoint,
                });
            }
            if let Some(cap) = config.grad_clip {
                if grad_norm > cap {
                    let scale = cap / grad_norm;
                    for grad in state.grads.values_mut() {
                        for g in grad.iter_mut() {
                            *g *= scale;
                        }
                    }
                    grad_norm = cap;
                }
            }
            opt.begin_step();
            for name in &trainable {
                if let Some(grad) = state.grads.get(name) {
                    let value = model
                        .array_mut(name)
                        .expect("trainable name resolves to an array");
                    opt.update(name, value, grad)?;
                }
            }
            step += 1;
            log.optimizer_steps += 1;
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: state.sum_loss / state.norm_count,
                supervised_tokens: state.supervised,
                masked_fraction: 1.0 - state.active as f64 / state.supervised as f64,
                grad_norm,
            });
            if let Some(heldout) = io.heldout {
                if step % config.eval_every_steps == 0 {
                    let metrics = evaluate(model, heldout, vocab, config.max_len)?;
                    log.evals.push(EvalRecord {
                        step,
                        epoch,
                        metrics,
                    });
                }
            }
        }

        if let Some(dir) = io.checkpoint_dir {
            let path = dir.join(format!("checkpoint_epoch{epoch}.pfl"));
            save_checkpoint(model, config.objective.tag(), step as u64, config.seed, &path)?;
            last_checkpoint = Some(path);
        }
        if let Some(heldout) = io.heldout {
            let metrics = evaluate(model, heldout, vocab, config.max_len)?;
            log.evals.push(EvalRecord {
                step,
                epoch,
                metrics,
            });
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
