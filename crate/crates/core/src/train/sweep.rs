//! Sweep drivers: each grid point trains a freshly initialized model under
//! identical seeds, so points differ only in the swept quantity. A failing
//! point is recorded and the sweep keeps going; converting runs into a
//! table surfaces the failure instead of dropping the point.

use crate::data::{Sample, Vocab};
use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig, TransformerModel};
use crate::objectives::{Mode, Objective};
use crate::stats::{RankPoint, SweepMetrics, ThresholdPoint, TrajectoryPoint};
use crate::train::eval::EvalMetrics;
use crate::train::{train, LoraConfig, TrainConfig, TrainIo};

/// Where every point's model comes from: a fresh seeded init, or a copy of
/// one shared starting model (e.g. a warmup checkpoint). A cold random init
/// never clears an Above-mode threshold, so sweeps usually start warm.
#[derive(Debug, Clone, Copy)]
pub enum SweepInit<'a> {
    Fresh(&'a ModelConfig),
    Warm(&'a TransformerModel),
}

#[derive(Debug, Clone)]
pub enum SweepAxis {
    /// ProFit threshold grid crossed with masking modes.
    Threshold { taus: Vec<f64>, modes: Vec<Mode> },
    /// Adapter ranks per objective, plus one full-fine-tuning reference.
    Rank {
        objectives: Vec<Objective>,
        ranks: Vec<usize>,
    },
    /// Per-epoch trajectories per objective.
    Epochs {
        objectives: Vec<Objective>,
        max: usize,
    },
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub label: String,
    pub config: TrainConfig,
    pub error: Option<String>,
    /// Held-out metrics at the end of each epoch, in epoch order.
    pub epoch_evals: Vec<(usize, EvalMetrics)>,
    pub supervised_fraction: Option<f64>,
}

impl SweepRun {
    pub fn final_metrics(&self) -> Option<&EvalMetrics> {
        self.epoch_evals.last().map(|(_, m)| m)
    }
}

fn sweep_metrics(m: &EvalMetrics) -> SweepMetrics {
    SweepMetrics {
        token_accuracy: m.token_accuracy,
        answer_em: m.answer_em,
        perplexity: m.perplexity,
    }
}

fn run_point(
    label: String,
    config: TrainConfig,
    init: SweepInit<'_>,
    train_set: &[Sample],
    heldout: &[Sample],
    vocab: &Vocab,
) -> Result<SweepRun> {
    let mut run = SweepRun {
        label,
        config: config.clone(),
        error: None,
        epoch_evals: Vec::new(),
        supervised_fraction: None,
    };
    let mut model = match init {
        SweepInit::Fresh(model_config) => init_model(model_config)?,
        SweepInit::Warm(model) => model.clone(),
    };
    let io = TrainIo {
        heldout: Some(heldout),
        ..TrainIo::default()
    };
    match train(&config, &mut model, train_set, vocab, io) {
        Ok(log) => {
            run.supervised_fraction = log.mean_supervised_fraction();
            for epoch in 1..=config.epochs {
                if let Some(rec) = log.evals.iter().rev().find(|e| e.epoch == epoch) {
                    run.epoch_evals.push((epoch, rec.metrics));
                }
            }
        }
        Err(e) => run.error = Some(e.to_string()),
    }
    Ok(run)
}

fn point_configs(axis: &SweepAxis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut points = Vec::new();
    match axis {
        SweepAxis::Threshold { taus, modes } => {
            let unmasked_norm = match base.objective {
                Objective::Profit { unmasked_norm, .. } => unmasked_norm,
                _ => false,
            };
            for &mode in modes {
                for &tau in taus {
                    let mut config = base.clone();
                    config.objective = Objective::Profit {
                        tau,
                        mode,
                        unmasked_norm,
                    };
                    points.push((format!("tau={tau}/{mode}"), config));
                }
            }
        }
        SweepAxis::Rank { objectives, ranks } => {
            for objective in objectives {
                for &r in ranks {
                    let mut config = base.clone();
                    config.objective = objective.clone();
                    let targets = base
                        .lora
                        .as_ref()
                        .map(|l| l.targets.clone())
                        .unwrap_or_default();
                    config.lora = Some(LoraConfig {
                        targets,
                        r,
                        alpha: 0.0,
                    });
                    points.push((format!("{}@{r}", objective.tag()), config));
                }
                let mut config = base.clone();
                config.objective = objective.clone();
                config.lora = None;
                points.push((format!("{}@full", objective.tag()), config));
            }
        }
        SweepAxis::Epochs { objectives, max } => {
            for objective in objectives {
                let mut config = base.clone();
                config.objective = objective.clone();
                config.epochs = *max;
                points.push((objective.tag().to_string(), config));
            }
        }
    }
    points
}

pub fn sweep(
    axis: &SweepAxis,
    base: &TrainConfig,
    init: SweepInit<'_>,
    train_set: &[Sample],
    heldout: &[Sample],
    vocab: &Vocab,
) -> Result<Vec<SweepRun>> {
    match axis {
        SweepAxis::Threshold { taus, modes } => {
            if taus.is_empty() || modes.is_empty() {
                return Err(Error::Config("threshold sweep: empty grid".into()));
            }
            for &tau in taus {
                if !(0.0..=1.0).contains(&tau) {
                    return Err(Error::Config(format!(
                        "threshold sweep: tau must lie in [0, 1], got {tau}"
                    )));
                }
            }
        }
        SweepAxis::Rank { objectives, ranks } => {
            if objectives.is_empty() || ranks.is_empty() {
                return Err(Error::Config("rank sweep: empty grid".into()));
            }
        }
        SweepAxis::Epochs { objectives, max } => {
            if objectives.is_empty() || *max == 0 {
                return Err(Error::Config("epoch sweep: empty grid".into()));
            }
        }
    }
    let mut runs = Vec::new();
    for (label, config) in point_configs(axis, base) {
        runs.push(run_point(label, config, init, train_set, heldout, vocab)?);
    }
    Ok(runs)
}

fn require_metrics(run: &SweepRun) -> Result<SweepMetrics> {
    if let Some(err) = &run.error {
        return Err(Error::Data(format!("sweep point {}: {err}", run.label)));
    }
    run.final_metrics()
        .map(sweep_metrics)
        .ok_or_else(|| Error::Data(format!("sweep point {}: no evaluations", run.label)))
}

pub fn threshold_points(runs: &[SweepRun]) -> Result<Vec<ThresholdPoint>> {
    runs.iter()
        .map(|run| {
            let (tau, mode) = match run.config.objective {
                Objective::Profit { tau, mode, .. } => (tau, mode),
                _ => {
                    return Err(Error::Contract(format!(
                        "sweep point {} is not a profit run",
                        run.label
                    )))
                }
            };
            Ok(ThresholdPoint {
                tau,
                mode,
                supervised_fraction: run.supervised_fraction.ok_or_else(|| {
                    Error::Data(format!("sweep point {}: no optimizer steps", run.label))
                })?,
                metrics: require_metrics(run)?,
            })
        })
        .collect()
}

pub fn trajectory_points(runs: &[SweepRun]) -> Result<Vec<TrajectoryPoint>> {
    let mut points = Vec::new();
    for run in runs {
        if let Some(err) = &run.error {
            return Err(Error::Data(format!("sweep point {}: {err}", run.label)));
        }
        for &(epoch, ref metrics) in &run.epoch_evals {
            points.push(TrajectoryPoint {
                objective: run.config.objective.tag().to_string(),
                epoch,
                metrics: sweep_metrics(metrics),
            });
        }
    }
    Ok(points)
}

pub fn rank_points(runs: &[SweepRun]) -> Result<Vec<RankPoint>> {
    runs.iter()
        .map(|run| {
            Ok(RankPoint {
                objective: run.config.objective.tag().to_string(),
                rank: run.config.lora.as_ref().map(|l| l.r),
                metrics: require_metrics(run)?,
            })
        })
        .collect()
}
