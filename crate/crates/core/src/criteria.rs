//! Loss functions: cross entropy, cross-augmentation matching, the clean-set
//! objective, leave-noise-out regularization, online prior penalization and
//! the combined training objective.
//!
//! Each loss exists in two forms. The `*_value` functions operate on plain
//! probability rows and back the per-sample scoring used for sample selection
//! and for test oracles. The tape functions build the differentiable graph
//! used for parameter updates. Probabilities entering a logarithm are always
//! clamped to `[PROB_CLAMP_LO, 1]` first.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub const PROB_CLAMP_LO: f64 = 1e-12;
pub const PROB_CLAMP_HI: f64 = 1.0;

/// Method hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Weight of the matching term on the strong view's self-predicted class.
    pub alpha: f64,
    /// Weight of the prior penalty.
    pub lambda: f64,
    /// Cap fraction for the confident-noisy set.
    pub kappa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 2.0, lambda: 0.1, kappa: 0.8 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!("kappa must be in (0, 1), got {}", self.kappa)));
        }
        Ok(())
    }
}

/// How the matching loss picks the strong view's reference class from the
/// weak-view prediction. The default follows the most-confident-class reading;
/// the least-confident variant is kept behind this switch for fidelity
/// experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum YPrimeMode {
    ArgMax,
    ArgMin,
}

/// Index of the winning class; ties break toward the smaller index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn argmin_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = i;
        }
    }
    best
}

pub fn y_prime(p_weak: &[f64], mode: YPrimeMode) -> usize {
    match mode {
        YPrimeMode::ArgMax => argmax_row(p_weak),
        YPrimeMode::ArgMin => argmin_row(p_weak),
    }
}

// ---- plain-value losses -------------------------------------------------------

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP_LO, PROB_CLAMP_HI)
}

/// Cross entropy of one probability row against a hard label.
pub fn cross_entropy_value(p: &[f64], y: usize) -> f64 {
    -clamp_prob(p[y]).ln()
}

/// Cross-augmentation matching loss of one sample.
pub fn matching_loss_value(
    p_weak: &[f64],
    p_strong: &[f64],
    y: usize,
    alpha: f64,
    mode: YPrimeMode,
) -> f64 {
    let yp = y_prime(p_weak, mode);
    cross_entropy_value(p_weak, y)
        + cross_entropy_value(p_strong, y)
        + alpha * cross_entropy_value(p_strong, yp)
}

/// Leave-noise-out contribution of one sample: `-ln(1 - p[y])`.
pub fn lnor_value(p: &[f64], y: usize) -> f64 {
    -clamp_prob(1.0 - p[y]).ln()
}

/// Online prior penalty of one sample: `-sum_k (1 - q[k]) ln p[k]`.
pub fn prior_penalty_value(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&pk, &qk)| -(1.0 - qk) * clamp_prob(pk).ln()).sum()
}

/// Prior-penalized cross entropy of one sample.
pub fn penalized_ce_value(p: &[f64], y: usize, q: &[f64], lambda: f64) -> f64 {
    cross_entropy_value(p, y) + lambda * prior_penalty_value(p, q)
}

/// The label-smoothing weights equivalent to the prior penalty: `s[k]`
/// sums to 1 whenever `q` does, and shrinks as `q[k]` grows.
pub fn smoothing_weights(q: &[f64], y: usize, lambda: f64) -> Vec<f64> {
    let k = q.len() as f64;
    let denom = 1.0 + lambda * k - lambda;
    q.iter()
        .enumerate()
        .map(|(i, &qk)| {
            if i == y {
                (1.0 + lambda * (1.0 - qk)) / denom
            } else {
                lambda * (1.0 - qk) / denom
            }
        })
        .collect()
}

/// The penalized cross entropy reconstructed through the smoothing identity:
/// `(1 + lambda*K - lambda) * sum_k s[k] * (-ln p[k])`.
pub fn penalized_ce_via_smoothing(p: &[f64], y: usize, q: &[f64], lambda: f64) -> f64 {
    let k = q.len() as f64;
    let scale = 1.0 + lambda * k - lambda;
    let s = smoothing_weights(q, y, lambda);
    scale * s.iter().zip(p).map(|(&sk, &pk)| -sk * clamp_prob(pk).ln()).sum::<f64>()
}

// ---- graph losses ----------------------------------------------------------------

/// `-ln(clamp(p))` summed over selected (row, label) pairs.
fn neg_log_gathered(tape: &Tape, p: &Tensor, rows: &[usize], labels: &[usize]) -> Result<Tensor> {
    debug_assert_eq!(rows.len(), labels.len());
    if rows.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let picked = tape.gather_pairs(p, rows, labels)?;
    let clamped = tape.clamp(&picked, PROB_CLAMP_LO, PROB_CLAMP_HI);
    let logs = tape.log(&clamped);
    Ok(tape.affine(&tape.sum(&logs), -1.0, 0.0))
}

/// Summed cross entropy of selected rows against their labels.
pub fn ce_sum(tape: &Tape, p: &Tensor, rows: &[usize], labels: &[usize]) -> Result<Tensor> {
    neg_log_gathered(tape, p, rows, labels)
}

/// Summed matching loss over the clean rows (the clean-set objective).
/// `y` and `yp` are indexed by position in `rows`.
#[allow(clippy::too_many_arguments)]
pub fn clean_loss_sum(
    tape: &Tape,
    p_weak: &Tensor,
    p_strong: &Tensor,
    rows: &[usize],
    y: &[usize],
    yp: &[usize],
    alpha: f64,
) -> Result<Tensor> {
    let lw = ce_sum(tape, p_weak, rows, y)?;
    let ls = ce_sum(tape, p_strong, rows, y)?;
    let lsp = ce_sum(tape, p_strong, rows, yp)?;
    let base = tape.add(&lw, &ls)?;
    tape.add(&base, &tape.affine(&lsp, alpha, 0.0))
}

/// Leave-noise-out regularization: `-sum_j ln(1 - p[j, y_j])` over noisy rows.
pub fn lnor_sum(tape: &Tape, p: &Tensor, rows: &[usize], labels: &[usize]) -> Result<Tensor> {
    if rows.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let picked = tape.gather_pairs(p, rows, labels)?;
    let one_minus = tape.affine(&picked, -1.0, 1.0);
    let clamped = tape.clamp(&one_minus, PROB_CLAMP_LO, PROB_CLAMP_HI);
    let logs = tape.log(&clamped);
    Ok(tape.affine(&tape.sum(&logs), -1.0, 0.0))
}

/// Prior penalty summed over selected rows: `-sum_i sum_k (1-q[k]) ln p[i,k]`.
pub fn prior_penalty_sum(tape: &Tape, p: &Tensor, rows: &[usize], q: &[f64]) -> Result<Tensor> {
    if rows.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let selected = tape.row_select(p, rows)?;
    let clamped = tape.clamp(&selected, PROB_CLAMP_LO, PROB_CLAMP_HI);
    let logs = tape.log(&clamped);
    let weights: Vec<f64> = q.iter().map(|&qk| 1.0 - qk).collect();
    let weighted = tape.scale_cols(&logs, &weights)?;
    Ok(tape.affine(&tape.sum(&weighted), -1.0, 0.0))
}

/// Mean prior-penalized cross entropy over a whole batch (warm-up objective).
pub fn penalized_ce_mean(
    tape: &Tape,
    p: &Tensor,
    labels: &[usize],
    q: &[f64],
    lambda: f64,
) -> Result<Tensor> {
    let m = labels.len();
    let rows: Vec<usize> = (0..m).collect();
    let ce = ce_sum(tape, p, &rows, labels)?;
    let total = if lambda > 0.0 {
        let pen = prior_penalty_sum(tape, p, &rows, q)?;
        tape.add(&ce, &tape.affine(&pen, lambda, 0.0))?
    } else {
        ce
    };
    Ok(tape.affine(&total, 1.0 / m as f64, 0.0))
}

/// Inputs of the combined objective for one batch.
pub struct TotalLossParts<'a> {
    pub p_weak: &'a Tensor,
    pub p_strong: &'a Tensor,
    /// Given labels for every row of the batch.
    pub labels: &'a [usize],
    /// Strong-view reference classes for every row of the batch.
    pub y_prime: &'a [usize],
    pub clean_rows: &'a [usize],
    pub noisy_rows: &'a [usize],
    pub q: &'a [f64],
    pub q_hat: &'a [f64],
}

/// The combined objective: clean-set matching loss, leave-noise-out term and
/// the prior penalties of both views on the clean set. Returned as the raw
/// sum; the trainer decides the normalization.
pub fn total_loss(
    tape: &Tape,
    parts: &TotalLossParts<'_>,
    weights: &LossWeights,
    use_lnor: bool,
) -> Result<Tensor> {
    let clean_y: Vec<usize> = parts.clean_rows.iter().map(|&r| parts.labels[r]).collect();
    let clean_yp: Vec<usize> = parts.clean_rows.iter().map(|&r| parts.y_prime[r]).collect();
    let mut loss = clean_loss_sum(
        tape,
        parts.p_weak,
        parts.p_strong,
        parts.clean_rows,
        &clean_y,
        &clean_yp,
        weights.alpha,
    )?;
    if use_lnor && !parts.noisy_rows.is_empty() {
        let noisy_y: Vec<usize> = parts.noisy_rows.iter().map(|&r| parts.labels[r]).collect();
        let ln = lnor_sum(tape, parts.p_weak, parts.noisy_rows, &noisy_y)?;
        loss = tape.add(&loss, &ln)?;
    }
    if weights.lambda > 0.0 && !parts.clean_rows.is_empty() {
        let vw = prior_penalty_sum(tape, parts.p_weak, parts.clean_rows, parts.q)?;
        let vs = prior_penalty_sum(tape, parts.p_strong, parts.clean_rows, parts.q_hat)?;
        let pen = tape.add(&vw, &vs)?;
        loss = tape.add(&loss, &tape.affine(&pen, weights.lambda, 0.0))?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_simplex(rng: &mut impl Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn ce_perfect_prediction_is_zero() {
        let mut p = vec![0.0; 10];
        p[4] = 1.0;
        assert_eq!(cross_entropy_value(&p, 4), 0.0);
    }

    #[test]
    fn ce_uniform_is_ln_k() {
        let p = vec![0.1; 10];
        assert!((cross_entropy_value(&p, 3) - 10.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_hand_value() {
        let p = [0.7, 0.2, 0.1];
        assert!((cross_entropy_value(&p, 1) - 1.6094379124341003).abs() < 1e-12);
    }

    #[test]
    fn matching_perfect_agreement_is_zero() {
        let mut p = vec![0.0; 5];
        p[2] = 1.0;
        assert_eq!(matching_loss_value(&p, &p, 2, 2.0, YPrimeMode::ArgMax), 0.0);
    }

    #[test]
    fn matching_alpha_zero_reduces_to_two_terms() {
        let pw = [0.8, 0.2];
        let ps = [0.6, 0.4];
        let expect = cross_entropy_value(&pw, 0) + cross_entropy_value(&ps, 0);
        assert!((matching_loss_value(&pw, &ps, 0, 0.0, YPrimeMode::ArgMax) - expect).abs() < 1e-15);
    }

    #[test]
    fn matching_hand_value() {
        // -ln 0.8 - ln 0.6 - 2 ln 0.6 = 0.223144 + 0.510826 + 1.021651
        let pw = [0.8, 0.2];
        let ps = [0.6, 0.4];
        let got = matching_loss_value(&pw, &ps, 0, 2.0, YPrimeMode::ArgMax);
        assert!((got - 1.7556204226121615).abs() < 1e-10, "{got}");
    }

    #[test]
    fn matching_dominates_weak_ce() {
        let mut rng = crate::stream::stream(31, 95, 0, 0);
        for _ in 0..50 {
            let pw = random_simplex(&mut rng, 6);
            let ps = random_simplex(&mut rng, 6);
            let y = rng.gen_range(0..6);
            let m = matching_loss_value(&pw, &ps, y, 2.0, YPrimeMode::ArgMax);
            assert!(m >= cross_entropy_value(&pw, y) - 1e-12);
        }
    }

    #[test]
    fn lnor_values() {
        let p = [0.5, 0.5];
        assert!((lnor_value(&p, 0) - 0.6931471805599453).abs() < 1e-12);
        let p0 = [1e-15, 1.0 - 1e-15];
        assert!(lnor_value(&p0, 0).abs() < 1e-12);
    }

    #[test]
    fn prior_penalty_vertex_prior() {
        // q at a vertex: only the other class is pushed toward confidence.
        let q = [1.0, 0.0];
        let p = [0.3, 0.7];
        assert!((prior_penalty_value(&p, &q) + 0.7_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prior_penalty_uniform_reduction() {
        let k = 4;
        let q = vec![1.0 / k as f64; k];
        let p = [0.4f64, 0.3, 0.2, 0.1];
        let expect = -(1.0 - 1.0 / k as f64) * p.iter().map(|&v| v.ln()).sum::<f64>();
        assert!((prior_penalty_value(&p, &q) - expect).abs() < 1e-12);
    }

    #[test]
    fn prior_penalty_matches_direct_sum() {
        let mut rng = crate::stream::stream(33, 94, 0, 0);
        for _ in 0..20 {
            let p = random_simplex(&mut rng, 5);
            let q = random_simplex(&mut rng, 5);
            let direct: f64 =
                (0..5).map(|k| -(1.0 - q[k]) * p[k].max(PROB_CLAMP_LO).ln()).sum();
            assert!((prior_penalty_value(&p, &q) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn penalized_ce_lambda_zero_is_plain_ce() {
        let p = [0.6, 0.4];
        let q = [0.5, 0.5];
        assert_eq!(penalized_ce_value(&p, 1, &q, 0.0), cross_entropy_value(&p, 1));
    }

    #[test]
    fn smoothing_weights_hand_value() {
        let q = vec![1.0 / 3.0; 3];
        let s = smoothing_weights(&q, 0, 0.1);
        assert!((s[0] - 0.8888888888888888).abs() < 1e-12, "{}", s[0]);
        assert!((s[1] - 0.05555555555555555).abs() < 1e-12);
        assert!((s[2] - 0.05555555555555555).abs() < 1e-12);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothing_identity_holds() {
        let mut rng = crate::stream::stream(35, 93, 0, 0);
        for _ in 0..100 {
            let k = rng.gen_range(2..=20);
            let p = random_simplex(&mut rng, k);
            let q = random_simplex(&mut rng, k);
            let lambda: f64 = rng.gen_range(0.0..1.0);
            let y = rng.gen_range(0..k);
            let direct = penalized_ce_value(&p, y, &q, lambda);
            let via = penalized_ce_via_smoothing(&p, y, &q, lambda);
            assert!((direct - via).abs() < 1e-10, "direct {direct} vs identity {via}");
            let s = smoothing_weights(&q, y, lambda);
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_weights_decrease_in_prior() {
        // larger q[k] -> smaller s[k], for target and non-target alike
        let lambda = 0.3;
        let base = [0.2, 0.3, 0.5];
        let bumped = [0.25, 0.3, 0.45];
        for y in 0..3 {
            let s0 = smoothing_weights(&base, y, lambda);
            let s1 = smoothing_weights(&bumped, y, lambda);
            assert!(s1[0] < s0[0], "s[0] must shrink when q[0] grows (y={y})");
        }
    }

    #[test]
    fn graph_losses_match_value_losses() {
        let tape = Tape::new();
        let mut rng = crate::stream::stream(37, 92, 0, 0);
        let m = 5;
        let k = 4;
        let mut pw_data = Vec::new();
        let mut ps_data = Vec::new();
        for _ in 0..m {
            pw_data.extend(random_simplex(&mut rng, k));
            ps_data.extend(random_simplex(&mut rng, k));
        }
        let p_weak = Tensor::new(&[m, k], pw_data.clone()).unwrap();
        let p_strong = Tensor::new(&[m, k], ps_data.clone()).unwrap();
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
        let yp: Vec<usize> =
            (0..m).map(|i| argmax_row(&pw_data[i * k..(i + 1) * k])).collect();
        let q = random_simplex(&mut rng, k);
        let q_hat = random_simplex(&mut rng, k);
        let weights = LossWeights { alpha: 2.0, lambda: 0.1, kappa: 0.8 };
        let clean = vec![0, 2, 3];
        let noisy = vec![1, 4];

        let parts = TotalLossParts {
            p_weak: &p_weak,
            p_strong: &p_strong,
            labels: &labels,
            y_prime: &yp,
            clean_rows: &clean,
            noisy_rows: &noisy,
            q: &q,
            q_hat: &q_hat,
        };
        let got = total_loss(&tape, &parts, &weights, true).unwrap().item();

        // independent term-by-term recomposition
        let mut expect = 0.0;
        for &i in &clean {
            let pw = &pw_data[i * k..(i + 1) * k];
            let ps = &ps_data[i * k..(i + 1) * k];
            expect += matching_loss_value(pw, ps, labels[i], weights.alpha, YPrimeMode::ArgMax);
            expect += weights.lambda
                * (prior_penalty_value(pw, &q) + prior_penalty_value(ps, &q_hat));
        }
        for &j in &noisy {
            expect += lnor_value(&pw_data[j * k..(j + 1) * k], labels[j]);
        }
        assert!((got - expect).abs() < 1e-10, "graph {got} vs oracle {expect}");
    }

    #[test]
    fn total_loss_degenerate_cases() {
        let tape = Tape::new();
        let p = Tensor::new(&[2, 2], vec![0.7, 0.3, 0.4, 0.6]).unwrap();
        let labels = [0, 1];
        let yp = [0, 1];
        let q = [0.5, 0.5];
        let parts = TotalLossParts {
            p_weak: &p,
            p_strong: &p,
            labels: &labels,
            y_prime: &yp,
            clean_rows: &[],
            noisy_rows: &[],
            q: &q,
            q_hat: &q,
        };
        // empty C and N: zero loss
        let w = LossWeights::default();
        assert_eq!(total_loss(&tape, &parts, &w, true).unwrap().item(), 0.0);

        // lambda = 0 and empty N reduces to the clean-set loss
        let parts2 = TotalLossParts { clean_rows: &[0, 1], ..parts };
        let w0 = LossWeights { lambda: 0.0, ..w };
        let got = total_loss(&tape, &parts2, &w0, true).unwrap().item();
        let expect = matching_loss_value(&[0.7, 0.3], &[0.7, 0.3], 0, w0.alpha, YPrimeMode::ArgMax)
            + matching_loss_value(&[0.4, 0.6], &[0.4, 0.6], 1, w0.alpha, YPrimeMode::ArgMax);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn clean_loss_additivity() {
        let tape = Tape::new();
        let p = Tensor::new(&[2, 3], vec![0.5, 0.3, 0.2, 0.5, 0.3, 0.2]).unwrap();
        let one = clean_loss_sum(&tape, &p, &p, &[0], &[1], &[0], 2.0).unwrap().item();
        let two = clean_loss_sum(&tape, &p, &p, &[0, 1], &[1, 1], &[0, 0], 2.0).unwrap().item();
        assert!((two - 2.0 * one).abs() < 1e-12);
    }
}
