//! Per-batch sample selection: OTSU split of the matching-loss distribution
//! into a clean set, and the capped largest-loss pick of confident-noisy
//! samples from the remainder.

use crate::error::{Error, Result};

pub const DEFAULT_OTSU_BINS: usize = 256;

/// Result of selecting on one batch. Ids index into the loss array the
/// selection ran on (batch positions); callers translate to sample ids.
#[derive(Clone, Debug)]
pub struct SelectionOutcome {
    pub threshold_epsilon: f64,
    pub clean_ids: Vec<usize>,
    pub noisy_ids: Vec<usize>,
    pub losses: Vec<f64>,
}

/// OTSU threshold over a continuous loss array with the default bin count.
pub fn otsu_threshold(losses: &[f64]) -> Result<f64> {
    otsu_threshold_with_bins(losses, DEFAULT_OTSU_BINS)
}

/// Histogram-based OTSU split.
///
/// Values are binned into `bins` equal-width bins over `[min, max]`; the
/// candidate thresholds are the `bins - 1` interior bin edges. Each bin keeps
/// the exact sum of its members, so class means (and therefore the
/// between-class variance) are identical to a direct scan over the raw values
/// for every candidate edge. Returns the lowest edge attaining the maximum
/// between-class variance. Identical values collapse to that value.
pub fn otsu_threshold_with_bins(losses: &[f64], bins: usize) -> Result<f64> {
    if losses.len() < 2 {
        return Err(Error::Usage(format!(
            "otsu threshold needs at least 2 values, got {}",
            losses.len()
        )));
    }
    if bins < 2 {
        return Err(Error::Config("otsu needs at least 2 bins".into()));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::Usage("otsu threshold on non-finite losses".into()));
    }
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(min);
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut sums = vec![0.0f64; bins];
    for &v in losses {
        let mut b = ((v - min) / width) as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[b] += 1;
        sums[b] += v;
    }
    let total_n = losses.len() as f64;
    let total_sum: f64 = sums.iter().sum();

    let mut best_var = f64::NEG_INFINITY;
    let mut best_edge = min + width;
    let mut n_a = 0.0;
    let mut sum_a = 0.0;
    for split in 1..bins {
        n_a += counts[split - 1] as f64;
        sum_a += sums[split - 1];
        let n_b = total_n - n_a;
        if n_a == 0.0 || n_b == 0.0 {
            continue;
        }
        let mu_a = sum_a / n_a;
        let mu_b = (total_sum - sum_a) / n_b;
        let var = n_a * n_b * (mu_a - mu_b) * (mu_a - mu_b);
        if var > best_var {
            best_var = var;
            best_edge = min + split as f64 * width;
        }
    }
    Ok(best_edge)
}

/// Ids whose loss is strictly below the threshold.
pub fn split_clean(losses: &[f64], epsilon: f64) -> Vec<usize> {
    (0..losses.len()).filter(|&i| losses[i] < epsilon).collect()
}

/// The confident-noisy pick: among non-clean ids, the `floor(kappa * count)`
/// with the largest losses. For nonnegative losses this maximizes the summed
/// loss under the cardinality cap. Ties break toward the smaller id.
pub fn pick_confident_noisy(losses: &[f64], clean_ids: &[usize], kappa: f64) -> Vec<usize> {
    let mut is_clean = vec![false; losses.len()];
    for &i in clean_ids {
        is_clean[i] = true;
    }
    let mut rest: Vec<usize> = (0..losses.len()).filter(|&i| !is_clean[i]).collect();
    let cap = (kappa * rest.len() as f64).floor() as usize;
    rest.sort_by(|&a, &b| {
        losses[b].partial_cmp(&losses[a]).unwrap().then(a.cmp(&b))
    });
    rest.truncate(cap);
    rest.sort_unstable();
    rest
}

/// Full selection for one batch of per-sample losses.
pub fn select(losses: &[f64], kappa: f64, bins: usize) -> Result<SelectionOutcome> {
    let epsilon = otsu_threshold_with_bins(losses, bins)?;
    let clean_ids = split_clean(losses, epsilon);
    let noisy_ids = pick_confident_noisy(losses, &clean_ids, kappa);
    Ok(SelectionOutcome { threshold_epsilon: epsilon, clean_ids, noisy_ids, losses: losses.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Direct scan: between-class variance of splitting raw values at `edge`.
    fn variance_at_edge(losses: &[f64], edge: f64) -> Option<f64> {
        let (mut n_a, mut s_a, mut n_b, mut s_b) = (0.0, 0.0, 0.0, 0.0);
        for &v in losses {
            if v < edge {
                n_a += 1.0;
                s_a += v;
            } else {
                n_b += 1.0;
                s_b += v;
            }
        }
        if n_a == 0.0 || n_b == 0.0 {
            return None;
        }
        let d = s_a / n_a - s_b / n_b;
        Some(n_a * n_b * d * d)
    }

    /// Brute-force oracle: scan every interior bin edge on the raw values.
    fn otsu_oracle(losses: &[f64], bins: usize) -> f64 {
        let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = (max - min) / bins as f64;
        let mut best = (f64::NEG_INFINITY, min + width);
        for split in 1..bins {
            let edge = min + split as f64 * width;
            if let Some(var) = variance_at_edge(losses, edge) {
                if var > best.0 {
                    best = (var, edge);
                }
            }
        }
        best.1
    }

    #[test]
    fn separates_two_far_groups() {
        let losses = [0.1, 0.1, 0.1, 5.0, 5.1];
        let eps = otsu_threshold(&losses).unwrap();
        assert!(eps > 0.1 && eps <= 5.0, "epsilon {eps}");
        assert_eq!(split_clean(&losses, eps), vec![0, 1, 2]);
        assert_eq!(eps, otsu_oracle(&losses, DEFAULT_OTSU_BINS));
    }

    #[test]
    fn all_equal_collapses() {
        let losses = [0.7; 6];
        let eps = otsu_threshold(&losses).unwrap();
        assert_eq!(eps, 0.7);
        assert!(split_clean(&losses, eps).is_empty());
    }

    #[test]
    fn bimodal_gaussian_threshold_in_gap() {
        let mut rng = crate::stream::stream(41, 91, 0, 0);
        let mut losses = Vec::with_capacity(1000);
        for i in 0..1000 {
            let center = if i % 2 == 0 { 0.0 } else { 10.0 };
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            losses.push(center + z);
        }
        let eps = otsu_threshold(&losses).unwrap();
        assert!((3.0..=7.0).contains(&eps), "epsilon {eps}");
        assert_eq!(eps, otsu_oracle(&losses, DEFAULT_OTSU_BINS));
    }

    #[test]
    fn oracle_equivalence_random_arrays() {
        let mut rng = crate::stream::stream(43, 91, 0, 0);
        for case in 0..50 {
            let n = rng.gen_range(2..300);
            let losses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..12.0)).collect();
            let eps = otsu_threshold(&losses).unwrap();
            let oracle = otsu_oracle(&losses, DEFAULT_OTSU_BINS);
            assert_eq!(eps, oracle, "case {case} disagrees");
        }
    }

    #[test]
    fn exact_epsilon_loss_excluded_from_clean() {
        let losses = [0.2, 0.5, 0.9];
        assert_eq!(split_clean(&losses, 0.5), vec![0]);
        assert_eq!(split_clean(&losses, 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn confident_noisy_picks_top_losses() {
        let losses = [9.0, 8.0, 7.0, 6.0, 5.0];
        let picked = pick_confident_noisy(&losses, &[], 0.8);
        assert_eq!(picked, vec![0, 1, 2, 3]);
    }

    #[test]
    fn confident_noisy_empty_cases() {
        let losses = [1.0, 2.0];
        // cap below one element
        assert!(pick_confident_noisy(&losses, &[], 0.4).is_empty());
        // everything clean
        assert!(pick_confident_noisy(&losses, &[0, 1], 0.8).is_empty());
    }

    #[test]
    fn exhaustive_subset_oracle() {
        let mut rng = crate::stream::stream(45, 91, 0, 0);
        for _ in 0..30 {
            let n = rng.gen_range(1..=12usize);
            let losses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
            let kappa: f64 = rng.gen_range(0.05..0.95);
            let picked = pick_confident_noisy(&losses, &[], kappa);
            let cap = (kappa * n as f64).floor() as usize;

            // enumerate every subset obeying the cap, maximize summed loss
            let mut best_sum = f64::NEG_INFINITY;
            for mask in 0u32..(1 << n) {
                let size = mask.count_ones() as usize;
                if size > cap {
                    continue;
                }
                let s: f64 = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| losses[i]).sum();
                if s > best_sum {
                    best_sum = s;
                }
            }
            let picked_sum: f64 = picked.iter().map(|&i| losses[i]).sum();
            assert!(
                (picked_sum - best_sum).abs() < 1e-12,
                "picked {picked_sum} vs best {best_sum}"
            );
            assert!(picked.len() <= cap);
        }
    }

    #[test]
    fn selection_sets_disjoint() {
        let mut rng = crate::stream::stream(47, 91, 0, 0);
        let losses: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..3.0)).collect();
        let out = select(&losses, 0.8, DEFAULT_OTSU_BINS).unwrap();
        let clean: std::collections::HashSet<_> = out.clean_ids.iter().collect();
        assert!(out.noisy_ids.iter().all(|i| !clean.contains(i)));
        let cap = ((losses.len() - out.clean_ids.len()) as f64 * 0.8).floor() as usize;
        assert!(out.noisy_ids.len() <= cap);
    }
}
