//! Central finite-difference gradient oracle.
//!
//! Used by the test suites to validate every backward rule against an
//! implementation-independent numerical derivative.

use super::{Tape, Tensor};
use crate::error::Result;

/// Compare the reverse-mode gradient of `f` at `x` against central finite
/// differences with step `h`, returning the maximum entrywise relative error
/// with denominator `max(|g_fd|, |g_ad|, 1e-8)`.
///
/// `f` must build a scalar loss from its input on the provided tape. It is
/// re-invoked `2 * len(x) + 1` times.
pub fn finite_difference_check(
    f: impl Fn(&Tape, &Tensor) -> Result<Tensor>,
    x_data: &[f64],
    shape: &[usize],
    h: f64,
) -> Result<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");

    // Reverse-mode gradient.
    let tape = Tape::new();
    let x = Tensor::param(shape, x_data.to_vec())?;
    let loss = f(&tape, &x)?;
    tape.backward(&loss)?;
    let g_ad = x.grad().unwrap_or_else(|| vec![0.0; x_data.len()]);

    // Central differences, one coordinate at a time on a no-grad tape.
    let eval = |data: &[f64]| -> Result<f64> {
        let tape = Tape::no_grad();
        let x = Tensor::new(shape, data.to_vec())?;
        Ok(f(&tape, &x)?.item())
    };
    let mut max_rel = 0.0f64;
    let mut probe = x_data.to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = eval(&probe)?;
        probe[i] = orig - h;
        let down = eval(&probe)?;
        probe[i] = orig;
        let g_fd = (up - down) / (2.0 * h);
        let denom = g_fd.abs().max(g_ad[i].abs()).max(1e-8);
        max_rel = max_rel.max((g_ad[i] - g_fd).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sum_of_squares_matches_analytic() {
        let mut rng = crate::stream::stream(21, 96, 0, 0);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let err = finite_difference_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(&sq))
            },
            &data,
            &[3, 4],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_difference_check(
            |_t, _x| Ok(Tensor::scalar(4.2)),
            &[1.0, 2.0, 3.0],
            &[3],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
