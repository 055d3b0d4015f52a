//! Tidy CSV tables for the threshold, trajectory, and rank sweeps.
//! Missing grid points are an error that names every absent point;
//! nothing is silently dropped.

use crate::error::{Error, Result};
use crate::objectives::{profit_mask, Mode};
use crate::tensor::TensorData;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepMetrics {
    pub token_accuracy: f64,
    pub answer_em: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone)]
pub struct ThresholdPoint {
    pub tau: f64,
    pub mode: Mode,
    pub supervised_fraction: f64,
    pub metrics: SweepMetrics,
}

#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub objective: String,
    pub epoch: usize,
    pub metrics: SweepMetrics,
}

#[derive(Debug, Clone)]
pub struct RankPoint {
    pub objective: String,
    /// `None` is the full-fine-tuning reference row.
    pub rank: Option<usize>,
    pub metrics: SweepMetrics,
}

/// Fraction of positions a ProFit mask keeps at (τ, mode).
pub fn mask_fraction(probs: &[f64], tau: f64, mode: Mode) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Data("mask_fraction over an empty sample".into()));
    }
    let td = TensorData::new(vec![probs.len()], probs.to_vec())?;
    let mask = profit_mask(&td, tau, mode)?;
    Ok(mask.iter().filter(|&&m| m).count() as f64 / probs.len() as f64)
}

fn check_grid<K: PartialEq + std::fmt::Display>(
    present: Vec<K>,
    expected: Vec<K>,
    table: &str,
) -> Result<()> {
    let missing: Vec<String> = expected
        .iter()
        .filter(|e| !present.contains(e))
        .map(|e| e.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{table}: missing grid points [{}]",
            missing.join(", ")
        )));
    }
    for (i, k) in present.iter().enumerate() {
        if present[..i].contains(k) {
            return Err(Error::Data(format!("{table}: duplicate grid point {k}")));
        }
    }
    Ok(())
}

pub fn threshold_sweep_table(
    points: &[ThresholdPoint],
    expected: &[(f64, Mode)],
) -> Result<String> {
    check_grid(
        points.iter().map(|p| format!("{}/{}", p.tau, p.mode)).collect(),
        expected.iter().map(|(t, m)| format!("{t}/{m}")).collect(),
        "threshold sweep",
    )?;
    let mut rows = points.to_vec();
    rows.sort_by(|a, b| {
        format!("{}", a.mode)
            .cmp(&format!("{}", b.mode))
            .then(a.tau.partial_cmp(&b.tau).unwrap())
    });
    let mut out =
        String::from("tau,mode,supervised_fraction,token_accuracy,answer_em,perplexity\n");
    for p in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.tau,
            p.mode,
            p.supervised_fraction,
            p.metrics.token_accuracy,
            p.metrics.answer_em,
            p.metrics.perplexity
        ));
    }
    Ok(out)
}

pub fn trajectory_table(
    points: &[TrajectoryPoint],
    objectives: &[String],
    epochs: usize,
) -> Result<String> {
    let expected: Vec<String> = objectives
        .iter()
        .flat_map(|o| (1..=epochs).map(move |e| format!("{o}@{e}")))
        .collect();
    check_grid(
        points
            .iter()
            .map(|p| format!("{}@{}", p.objective, p.epoch))
            .collect(),
        expected,
        "trajectory",
    )?;
    let mut rows = points.to_vec();
    rows.sort_by(|a, b| a.objective.cmp(&b.objective).then(a.epoch.cmp(&b.epoch)));
    let mut out = String::from("objective,epoch,token_accuracy,answer_em,perplexity\n");
    for p in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.objective,
            p.epoch,
            p.metrics.token_accuracy,
            p.metrics.answer_em,
            p.metrics.perplexity
        ));
    }
    Ok(out)
}

fn rank_key(rank: Option<usize>) -> String {
    match rank {
        Some(r) => r.to_string(),
        None => "full".to_string(),
    }
}

/// Rank table; each objective must also carry its full-fine-tuning
/// reference row (`rank = None`).
pub fn rank_sweep_table(
    points: &[RankPoint],
    objectives: &[String],
    ranks: &[usize],
) -> Result<String> {
    let expected: Vec<String> = objectives
        .iter()
        .flat_map(|o| {
            ranks
                .iter()
                .map(move |r| format!("{o}@{r}"))
                .chain(std::iter::once(format!("{o}@full")))
        })
        .collect();
    check_grid(
        points
            .iter()
            .map(|p| format!("{}@{}", p.objective, rank_key(p.rank)))
            .collect(),
        expected,
        "rank sweep",
    )?;
    let mut rows = points.to_vec();
    rows.sort_by(|a, b| {
        a.objective
            .cmp(&b.objective)
            .then(a.rank.unwrap_or(usize::MAX).cmp(&b.rank.unwrap_or(usize::MAX)))
    });
    let mut out = String::from("objective,rank,token_accuracy,answer_em,perplexity\n");
    for p in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.objective,
            rank_key(p.rank),
            p.metrics.token_accuracy,
            p.metrics.answer_em,
            p.metrics.perplexity
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const M: SweepMetrics = SweepMetrics {
        token_accuracy: 0.5,
        answer_em: 0.25,
        perplexity: 8.0,
    };

    #[test]
    fn threshold_table_sorts_and_lists_every_point() {
        let grid = [(0.1, Mode::Above), (0.3, Mode::Above), (0.1, Mode::Below)];
        let points: Vec<ThresholdPoint> = grid
            .iter()
            .rev()
            .map(|&(tau, mode)| ThresholdPoint {
                tau,
                mode,
                supervised_fraction: 0.4,
                metrics: M,
            })
            .collect();
        let csv = threshold_sweep_table(&points, &grid).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0.1,above"));
        assert!(lines[2].starts_with("0.3,above"));
        assert!(lines[3].starts_with("0.1,below"));
    }

    #[test]
    fn missing_points_are_all_named() {
        let grid = [(0.1, Mode::Above), (0.3, Mode::Above), (0.5, Mode::Above)];
        let points = vec![ThresholdPoint {
            tau: 0.1,
            mode: Mode::Above,
            supervised_fraction: 0.4,
            metrics: M,
        }];
        let err = threshold_sweep_table(&points, &grid).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0.3/above") && msg.contains("0.5/above"), "{msg}");
    }

    #[test]
    fn duplicate_points_are_rejected() {
        let grid = [(0.1, Mode::Above)];
        let p = ThresholdPoint {
            tau: 0.1,
            mode: Mode::Above,
            supervised_fraction: 0.4,
            metrics: M,
        };
        let err = threshold_sweep_table(&[p.clone(), p], &grid).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn trajectory_requires_every_epoch_per_objective() {
        let objectives = vec!["profit".to_string(), "standard_sft".to_string()];
        let mut points = Vec::new();
        for o in &objectives {
            for e in 1..=3 {
                points.push(TrajectoryPoint {
                    objective: o.clone(),
                    epoch: e,
                    metrics: M,
                });
            }
        }
        let csv = trajectory_table(&points, &objectives, 3).unwrap();
        assert_eq!(csv.lines().count(), 7);
        points.pop();
        let err = trajectory_table(&points, &objectives, 3).unwrap_err();
        assert!(err.to_string().contains("standard_sft@3"));
    }

    #[test]
    fn rank_table_includes_the_full_reference_row() {
        let objectives = vec!["profit".to_string()];
        let ranks = [4, 8];
        let mut points: Vec<RankPoint> = ranks
            .iter()
            .map(|&r| RankPoint {
                objective: "profit".into(),
                rank: Some(r),
                metrics: M,
            })
            .collect();
        let err = rank_sweep_table(&points, &objectives, &ranks).unwrap_err();
        assert!(err.to_string().contains("profit@full"));
        points.push(RankPoint {
            objective: "profit".into(),
            rank: None,
            metrics: M,
        });
        let csv = rank_sweep_table(&points, &objectives, &ranks).unwrap();
        assert!(csv.lines().last().unwrap().starts_with("profit,full"));
    }

    #[test]
    fn mask_fraction_is_monotone_non_increasing_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let probs: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let mut last = f64::INFINITY;
        for tau in grid {
            let frac = mask_fraction(&probs, tau, Mode::Above).unwrap();
            assert!(frac <= last + 1e-12, "fraction rose at tau {tau}");
            last = frac;
        }
    }
}
