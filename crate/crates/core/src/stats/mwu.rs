//! Two-sided Mann–Whitney U test with midranks: tie-corrected normal
//! approximation for large groups, permutation (full enumeration when
//! feasible, otherwise ≥ 10⁵ Monte-Carlo draws) below that.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Group size at which both groups switch to the normal approximation.
const NORMAL_APPROX_MIN: usize = 20;

/// Largest number of assignments enumerated exhaustively.
const ENUM_LIMIT: f64 = 200_000.0;

const MONTE_CARLO_DRAWS: usize = 100_000;

/// Permutation draws are deterministic; this is not a tunable.
const PERMUTATION_SEED: u64 = 0x5EED_0F_4A_93;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MwuMethod {
    ExactEnumeration,
    MonteCarloPermutation,
    NormalApprox,
}

#[derive(Debug, Clone)]
pub struct MwuResult {
    /// U statistic of the first group.
    pub u: f64,
    pub p_value: f64,
    pub method: MwuMethod,
}

fn validate(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data(format!(
            "two-sample test needs both groups non-empty ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Data("two-sample test: non-finite value".into()));
    }
    Ok(())
}

/// Midranks of the pooled sample, in pooled order (a then b).
fn midranks(a: &[f64], b: &[f64]) -> Vec<f64> {
    let pooled: Vec<f64> = a.iter().chain(b).cloned().collect();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].partial_cmp(&pooled[j]).unwrap());
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; ties share the average rank of the run.
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn u_statistic(ranks: &[f64], n1: usize) -> f64 {
    let r1: f64 = ranks[..n1].iter().sum();
    r1 - (n1 * (n1 + 1)) as f64 / 2.0
}

fn tie_term(ranks: &[f64]) -> f64 {
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        term += t * t * t - t;
        i = j + 1;
    }
    term
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut c = 1.0_f64;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
        if c > 1e18 {
            return f64::INFINITY;
        }
    }
    c
}

fn normal_p(u: f64, n1: usize, n2: usize, ranks: &[f64]) -> f64 {
    let n = (n1 + n2) as f64;
    let mu = (n1 * n2) as f64 / 2.0;
    let var = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - tie_term(ranks) / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

/// Deviation from the null mean that a permuted assignment must reach to
/// count against the observed statistic.
fn permutation_p(ranks: &[f64], n1: usize, u_obs: f64) -> (f64, MwuMethod) {
    let n = ranks.len();
    let n2 = n - n1;
    let mu = (n1 * n2) as f64 / 2.0;
    let obs_dev = (u_obs - mu).abs() - 1e-9;
    if binomial(n, n1) <= ENUM_LIMIT {
        let mut hits = 0u64;
        let mut total = 0u64;
        let mut idx: Vec<usize> = (0..n1).collect();
        loop {
            let r: f64 = idx.iter().map(|&i| ranks[i]).sum();
            let u = r - (n1 * (n1 + 1)) as f64 / 2.0;
            if (u - mu).abs() >= obs_dev {
                hits += 1;
            }
            total += 1;
            // Advance to the next lexicographic combination.
            let mut pos = n1;
            loop {
                if pos == 0 {
                    return (hits as f64 / total as f64, MwuMethod::ExactEnumeration);
                }
                pos -= 1;
                if idx[pos] != pos + n - n1 {
                    break;
                }
            }
            idx[pos] += 1;
            for k in pos + 1..n1 {
                idx[k] = idx[k - 1] + 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PERMUTATION_SEED);
    let mut pool: Vec<usize> = (0..n).collect();
    let mut hits = 0u64;
    for _ in 0..MONTE_CARLO_DRAWS {
        let (chosen, _) = pool.partial_shuffle(&mut rng, n1);
        let r: f64 = chosen.iter().map(|&i| ranks[i]).sum();
        let u = r - (n1 * (n1 + 1)) as f64 / 2.0;
        if (u - mu).abs() >= obs_dev {
            hits += 1;
        }
    }
    (
        (hits + 1) as f64 / (MONTE_CARLO_DRAWS + 1) as f64,
        MwuMethod::MonteCarloPermutation,
    )
}

pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MwuResult> {
    validate(a, b)?;
    let ranks = midranks(a, b);
    let u = u_statistic(&ranks, a.len());
    if a.len() >= NORMAL_APPROX_MIN && b.len() >= NORMAL_APPROX_MIN {
        return Ok(MwuResult {
            u,
            p_value: normal_p(u, a.len(), b.len(), &ranks),
            method: MwuMethod::NormalApprox,
        });
    }
    let (p_value, method) = permutation_p(&ranks, a.len(), u);
    Ok(MwuResult { u, p_value, method })
}

/// Always-permuted p-value, for cross-validating the normal approximation.
pub fn permutation_p_value(a: &[f64], b: &[f64]) -> Result<f64> {
    validate(a, b)?;
    let ranks = midranks(a, b);
    let u = u_statistic(&ranks, a.len());
    Ok(permutation_p(&ranks, a.len(), u).0)
}

/// (U statistic, two-sided p-value) for core-vs-trivial probability lists.
pub fn two_sample_test(core: &[f64], trivial: &[f64]) -> Result<(f64, f64)> {
    let r = mann_whitney(core, trivial)?;
    Ok((r.u, r.p_value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identical_small_samples_give_u_4_5_and_p_one() {
        let (u, p) = two_sample_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((u - 4.5).abs() < 1e-12);
        assert!((p - 1.0).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn fully_separated_large_groups_reject_strongly() {
        let mut hi = Vec::new();
        let mut lo = Vec::new();
        for _ in 0..20 {
            hi.extend([0.9, 0.91, 0.92]);
            lo.extend([0.05, 0.06, 0.07]);
        }
        let r = mann_whitney(&hi, &lo).unwrap();
        assert_eq!(r.method, MwuMethod::NormalApprox);
        assert!(r.p_value < 1e-4, "p = {}", r.p_value);
        assert!((r.u - 3600.0).abs() < 1e-9);
    }

    #[test]
    fn fully_separated_small_groups_reject_via_enumeration() {
        let hi = [0.9, 0.91, 0.92, 0.93, 0.94, 0.95, 0.96, 0.97];
        let lo = [0.05, 0.06, 0.07, 0.08, 0.09, 0.10, 0.11, 0.12];
        let r = mann_whitney(&hi, &lo).unwrap();
        assert_eq!(r.method, MwuMethod::ExactEnumeration);
        // Only the two extreme assignments reach the observed deviation.
        assert!((r.p_value - 2.0 / binomial(16, 8)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_in_its_arguments() {
        let a = [0.1, 0.5, 0.3, 0.9, 0.2];
        let b = [0.4, 0.6, 0.8];
        let ab = mann_whitney(&a, &b).unwrap();
        let ba = mann_whitney(&b, &a).unwrap();
        assert_eq!(ab.p_value, ba.p_value);
        assert!((ab.u + ba.u - (a.len() * b.len()) as f64).abs() < 1e-12);

        let big_a: Vec<f64> = (0..30).map(|i| (i as f64) / 31.0).collect();
        let big_b: Vec<f64> = (0..25).map(|i| (i as f64) / 40.0 + 0.2).collect();
        let ab = mann_whitney(&big_a, &big_b).unwrap();
        let ba = mann_whitney(&big_b, &big_a).unwrap();
        assert_eq!(ab.p_value, ba.p_value);
    }

    #[test]
    fn all_tied_values_never_reject() {
        let small = mann_whitney(&[0.5; 5], &[0.5; 4]).unwrap();
        assert!((small.p_value - 1.0).abs() < 1e-12);
        let large = mann_whitney(&[0.5; 25], &[0.5; 25]).unwrap();
        assert_eq!(large.p_value, 1.0);
    }

    #[test]
    fn empty_group_is_a_data_error() {
        assert!(matches!(
            two_sample_test(&[], &[1.0]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            two_sample_test(&[1.0], &[]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            two_sample_test(&[f64::NAN], &[1.0]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn normal_and_permutation_agree_at_n_30() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for instance in 0..20 {
            let shift = rng.gen_range(-0.15..0.15);
            let a: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..30)
                .map(|_| (rng.gen_range(0.0f64..1.0) + shift).clamp(0.0, 1.0))
                .collect();
            let normal = mann_whitney(&a, &b).unwrap();
            assert_eq!(normal.method, MwuMethod::NormalApprox);
            let perm = permutation_p_value(&a, &b).unwrap();
            assert!(
                (normal.p_value - perm).abs() <= 0.02,
                "instance {instance}: normal {} vs permutation {perm}",
                normal.p_value
            );
        }
    }

    #[test]
    fn midranks_average_over_ties() {
        let ranks = midranks(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert_eq!(ranks, vec![1.5, 3.5, 5.5, 1.5, 3.5, 5.5]);
    }
}
