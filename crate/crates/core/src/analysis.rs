//! Statistical comparison of runs: exact one-sided Wilcoxon signed-rank
//! tests, Bonferroni correction, run aggregation, and origin-fraction time
//! series over population histories.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runner::IterationRecord;

/// Exact one-sided Wilcoxon signed-rank test on paired samples.
///
/// Differences `x_i - y_i` are computed, zeros dropped, and absolute values
/// ranked with average ranks for ties. The returned p-value is the exact
/// probability, under sign-symmetric nulls, that the positive-rank sum W+ is
/// at least the observed one, found by enumerating all 2^n sign assignments.
/// Restricted to n <= 20 pairs so enumeration stays exact and fast.
pub fn wilcoxon_one_sided(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Stats(format!(
            "paired test needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() || x.len() > 20 {
        return Err(Error::Stats(format!(
            "exact enumeration supports 1..=20 pairs, got {}",
            x.len()
        )));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::Stats(
            "all differences are zero; the test is undefined".into(),
        ));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Stats("non-finite difference".into()));
    }

    // average ranks of |d|, doubled so ties stay integral
    let m = diffs.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        diffs[a]
            .abs()
            .partial_cmp(&diffs[b].abs())
            .expect("finite values")
    });
    let mut ranks2 = vec![0u64; m];
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j + 1 < m && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // positions i..=j share the average rank ((i+1) + (j+1)) / 2
        let rank2 = (i as u64 + 1) + (j as u64 + 1);
        for &ix in &order[i..=j] {
            ranks2[ix] = rank2;
        }
        i = j + 1;
    }

    let observed: u64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    let total_masks: u64 = 1 << m;
    let mut count: u64 = 0;
    for mask in 0..total_masks {
        let mut w2: u64 = 0;
        for (k, r) in ranks2.iter().enumerate() {
            if mask & (1 << k) != 0 {
                w2 += r;
            }
        }
        if w2 >= observed {
            count += 1;
        }
    }
    Ok(count as f64 / total_masks as f64)
}

/// Bonferroni-corrected significance threshold: `alpha / k`.
pub fn bonferroni_threshold(alpha: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Stats("number of tests must be >= 1".into()));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Stats(format!("alpha must be positive, got {alpha}")));
    }
    Ok(alpha / k as f64)
}

/// Per-iteration fractions of weight-owning slots by origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginFractionRow {
    pub iteration: usize,
    pub fractions: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginSeries {
    pub points: Vec<OriginFractionRow>,
}

/// Track how layer origins spread through the population over time. Identity
/// slots own no weights and are excluded; fractions at each iteration sum to
/// one (an iteration where no slot owns weights yields an empty map).
pub fn origin_fractions(history: &[IterationRecord]) -> OriginSeries {
    let points = history
        .iter()
        .map(|rec| {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            let mut total = 0usize;
            for row in &rec.rows {
                for origin in row.slot_origins.iter().flatten() {
                    *counts.entry(*origin).or_insert(0) += 1;
                    total += 1;
                }
            }
            let fractions = counts
                .into_iter()
                .map(|(o, c)| (o, c as f64 / total as f64))
                .collect();
            OriginFractionRow {
                iteration: rec.iteration,
                fractions,
            }
        })
        .collect();
    OriginSeries { points }
}

/// Mean / standard deviation / per-run values over a set of final fitnesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (n-1 denominator); 0 for a single run.
    pub std: f64,
    /// Set when only one run was aggregated, so `std` is not meaningful.
    pub single_run: bool,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Stats("aggregate needs at least one run".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        var.sqrt()
    };
    Ok(Aggregate {
        mean,
        std,
        single_run: n == 1,
        n,
    })
}

/// Final fitness of one algorithm across seeds, for paired comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSet {
    pub algorithm: String,
    /// (seed, final best fitness), one entry per run.
    pub runs: Vec<(u64, f64)>,
}

impl RunSet {
    pub fn final_values(&self) -> Vec<f64> {
        self.runs.iter().map(|(_, f)| *f).collect()
    }
}

/// Pair two run sets by seed (ascending); seeds present in only one set are
/// dropped.
pub fn pair_by_seed(a: &RunSet, b: &RunSet) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut seeds: Vec<u64> = a.runs.iter().map(|(s, _)| *s).collect();
    seeds.sort_unstable();
    for seed in seeds {
        let av = a.runs.iter().find(|(s, _)| *s == seed).map(|(_, f)| *f);
        let bv = b.runs.iter().find(|(s, _)| *s == seed).map(|(_, f)| *f);
        if let (Some(av), Some(bv)) = (av, bv) {
            xs.push(av);
            ys.push(bv);
        }
    }
    (xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_positive_distinct_n9() {
        // W+ takes its maximum only on the all-positive assignment:
        // p = 1/2^9 = 0.001953125
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let y = vec![0.0; 9];
        assert_eq!(wilcoxon_one_sided(&x, &y).unwrap(), 0.001953125);
    }

    #[test]
    fn smallest_difference_negative_n9() {
        // flipping only the smallest |d| gives the second-largest W+:
        // p = 2/512 = 0.00390625
        let mut x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        x[0] = -1.0;
        let y = vec![0.0; 9];
        assert_eq!(wilcoxon_one_sided(&x, &y).unwrap(), 0.00390625);
    }

    #[test]
    fn second_smallest_negative_n9() {
        // p = 3/512 = 0.005859375
        let mut x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        x[1] = -2.0;
        let y = vec![0.0; 9];
        assert_eq!(wilcoxon_one_sided(&x, &y).unwrap(), 0.005859375);
    }

    #[test]
    fn single_positive_pair() {
        assert_eq!(wilcoxon_one_sided(&[1.0], &[0.0]).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(wilcoxon_one_sided(&[1.0, 2.0], &[1.0]).is_err());
        assert!(wilcoxon_one_sided(&[], &[]).is_err());
        assert!(wilcoxon_one_sided(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        let x: Vec<f64> = (0..21).map(|v| v as f64).collect();
        assert!(wilcoxon_one_sided(&x, &vec![0.0; 21]).is_err());
    }

    #[test]
    fn zeros_dropped_before_ranking() {
        // pairs with zero difference do not contribute
        let p1 = wilcoxon_one_sided(&[1.0, 2.0, 5.0], &[1.0, 0.0, 0.0]).unwrap();
        let p2 = wilcoxon_one_sided(&[2.0, 5.0], &[0.0, 0.0]).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn tied_magnitudes_get_average_ranks() {
        // |d| = (1, 1, 2): ranks (1.5, 1.5, 3); one negative of the tied pair
        // observed W+ = 1.5 + 3 = 4.5; masks with W+ >= 4.5: {1,3},{2,3},
        // {1,2,3} and {3} has 3 < 4.5 -> count 3, p = 3/8
        let x = vec![1.0, -1.0, 2.0];
        let y = vec![0.0, 0.0, 0.0];
        assert_eq!(wilcoxon_one_sided(&x, &y).unwrap(), 3.0 / 8.0);
    }

    #[test]
    fn bonferroni_values() {
        assert_eq!(bonferroni_threshold(0.05, 4).unwrap(), 0.0125);
        assert_eq!(bonferroni_threshold(0.05, 1).unwrap(), 0.05);
        assert_eq!(bonferroni_threshold(0.04, 8).unwrap(), 0.005);
        assert!(bonferroni_threshold(0.05, 0).is_err());
    }

    #[test]
    fn bonferroni_strictly_decreasing_in_k() {
        let mut last = f64::INFINITY;
        for k in 1..=10 {
            let t = bonferroni_threshold(0.05, k).unwrap();
            assert!(t < last);
            last = t;
        }
    }

    #[test]
    fn aggregate_basics() {
        let a = aggregate(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.mean, 2.0);
        assert_eq!(a.std, 1.0);
        assert!(!a.single_run);

        let a = aggregate(&[4.0]).unwrap();
        assert_eq!(a.std, 0.0);
        assert!(a.single_run);

        let a = aggregate(&[2.5, 2.5, 2.5]).unwrap();
        assert_eq!(a.std, 0.0);
    }

    /// Independent oracle: recursive enumeration over sign assignments with
    /// its own ranking routine, using f64 rank arithmetic throughout.
    fn oracle_wilcoxon(x: &[f64], y: &[f64]) -> f64 {
        let diffs: Vec<f64> = x
            .iter()
            .zip(y)
            .map(|(a, b)| a - b)
            .filter(|d| *d != 0.0)
            .collect();
        let m = diffs.len();
        let mut abs_sorted: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        abs_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank_of = |v: f64| -> f64 {
            let below = abs_sorted.iter().filter(|&&a| a < v).count();
            let equal = abs_sorted.iter().filter(|&&a| a == v).count();
            // average of ranks below+1 ..= below+equal
            (below + 1 + below + equal) as f64 / 2.0
        };
        let ranks: Vec<f64> = diffs.iter().map(|d| rank_of(d.abs())).collect();
        let observed: f64 = diffs
            .iter()
            .zip(&ranks)
            .filter(|(d, _)| **d > 0.0)
            .map(|(_, r)| *r)
            .sum();
        fn count_ge(ranks: &[f64], k: usize, acc: f64, target: f64) -> u64 {
            if k == ranks.len() {
                return u64::from(acc >= target);
            }
            count_ge(ranks, k + 1, acc, target) + count_ge(ranks, k + 1, acc + ranks[k], target)
        }
        count_ge(&ranks, 0, 0.0, observed - 1e-9) as f64 / (1u64 << m) as f64
    }

    proptest! {
        #[test]
        fn enumeration_matches_independent_oracle(
            n in 1usize..=12,
            seed in 0u64..1000,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::StreamRng::derive(seed, "wilcoxon-oracle", &[n as u64]);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            prop_assume!(x.iter().zip(&y).any(|(a, b)| a != b));
            let p = wilcoxon_one_sided(&x, &y).unwrap();
            let q = oracle_wilcoxon(&x, &y);
            prop_assert_eq!(p, q);
        }

        // scale invariance: multiplying all differences by a positive
        // constant leaves the p-value unchanged
        #[test]
        fn scale_invariance(seed in 0u64..500, scale in 1e-3f64..1e3) {
            use rand::Rng;
            let mut rng = crate::rng::StreamRng::derive(seed, "wilcoxon-scale", &[]);
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = vec![0.0; 8];
            prop_assume!(x.iter().any(|v| *v != 0.0));
            let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
            prop_assert_eq!(
                wilcoxon_one_sided(&x, &y).unwrap(),
                wilcoxon_one_sided(&scaled, &y).unwrap()
            );
        }
    }
}
