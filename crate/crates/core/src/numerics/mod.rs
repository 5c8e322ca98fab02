//! Dense numeric kernel shared by the trainers and attacks.

mod adam;
mod gradcheck;
mod lstsq;
mod matrix;
pub mod rng;

pub use adam::{adam_step, AdamGroup, AdamState, ParamBlocks};
pub use gradcheck::{gradient_check, gradient_check_report, GradCheckReport, MAX_PROBES};
pub use lstsq::{least_squares_fit, LinearMap};
pub use matrix::{axpy, dot, mean_rows, norm, sigmoid, softplus, sq_dist, DenseMatrix};

use crate::error::{domain, Error, Result};

/// Row-wise `softmax(x / temperature)` with max subtraction.
pub fn softmax_rows(x: &DenseMatrix, temperature: f64) -> Result<DenseMatrix> {
    domain!(temperature > 0.0, "softmax temperature must be positive, got {temperature}");
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r), temperature);
    }
    Ok(out)
}

/// In-place softmax of one row at the given temperature.
pub fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let inv_t = 1.0 / temperature;
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // fully masked row; leave a uniform distribution
        let n = row.len() as f64;
        row.iter_mut().for_each(|v| *v = 1.0 / n);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) * inv_t).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// `log(sum(exp(x)))` with max subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Fails fast on a non-finite scalar.
pub fn ensure_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Identity in the forward direction; scales incoming gradients by `-lambda`
/// in the backward direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReversal {
    lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Result<Self> {
        domain!(lambda >= 0.0, "reversal lambda must be non-negative, got {lambda}");
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    pub fn backward(&self, grad: &[f64]) -> Vec<f64> {
        grad.iter().map(|g| -self.lambda * g).collect()
    }
}

/// Free-function form of the reversal layer; returns the forward output.
pub fn gradient_reversal(x: &[f64], lambda: f64) -> Result<Vec<f64>> {
    Ok(GradientReversal::new(lambda)?.forward(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let x = DenseMatrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![10.0, 0.0, 0.0], vec![1.0, 2.0, 0.0]]).unwrap();
        let s = softmax_rows(&x, 1.0).unwrap();
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let sharp = softmax_rows(&x, 0.05).unwrap();
        // 1 - 1e-30 rounds to 1.0 in f64, so check the complementary mass instead
        assert!(sharp.get(1, 1) + sharp.get(1, 2) < 1e-30);
        assert!(sharp.get(1, 0) >= 1.0 - 1e-30);
        let two = softmax_rows(&DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap(), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((two.get(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((two.get(0, 1) - e / (1.0 + e)).abs() < 1e-15);
        assert!((two.get(0, 0) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let x = DenseMatrix::zeros(1, 2);
        assert!(matches!(softmax_rows(&x, 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_rows(&x, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn reversal_definition() {
        let v = [1.5, -2.0, 0.0];
        assert_eq!(gradient_reversal(&v, 3.0).unwrap(), v.to_vec());
        let grl = GradientReversal::new(1.0).unwrap();
        assert_eq!(grl.backward(&v), vec![-1.5, 2.0, -0.0]);
        let blocked = GradientReversal::new(0.0).unwrap();
        assert!(blocked.backward(&v).iter().all(|g| *g == 0.0));
        assert!(GradientReversal::new(-0.1).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e4f64..1e4, 1..40), t in 0.01f64..10.0) {
            let x = DenseMatrix::from_rows(&[row]).unwrap();
            let s = softmax_rows(&x, t).unwrap();
            let sum: f64 = s.row(0).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(0).iter().all(|v| *v >= 0.0));
        }
    }
}
