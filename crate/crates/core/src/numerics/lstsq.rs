use nalgebra::DMatrix;

use crate::error::{contract, Error, Result};
use crate::numerics::DenseMatrix;

/// Affine map `x -> W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    /// `d_out x d_in`.
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LinearMap {
    pub fn identity(d: usize) -> Self {
        Self {
            weights: DenseMatrix::identity(d),
            bias: vec![0.0; d],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weights.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        contract!(
            x.len() == self.d_in(),
            "linear map expects input dim {}, got {}",
            self.d_in(),
            x.len()
        );
        let mut y = self.weights.matvec(x);
        for (yi, bi) in y.iter_mut().zip(&self.bias) {
            *yi += bi;
        }
        Ok(y)
    }
}

/// Ridge-regularized least squares with a bias column.
///
/// Minimizes `sum_i ||W x_i + b - y_i||^2 + l2 ||W||_F^2` (the bias is not
/// penalized). With `l2 == 0` the minimum-norm solution is returned through
/// an SVD pseudo-inverse of the design matrix, which also covers
/// rank-deficient data.
pub fn least_squares_fit(inputs: &[Vec<f64>], targets: &[Vec<f64>], l2: f64) -> Result<LinearMap> {
    contract!(!inputs.is_empty(), "least squares needs at least one sample");
    contract!(
        inputs.len() == targets.len(),
        "inputs ({}) and targets ({}) differ in count",
        inputs.len(),
        targets.len()
    );
    contract!(l2 >= 0.0, "l2 must be non-negative");
    let n = inputs.len();
    let p = inputs[0].len();
    let q = targets[0].len();
    contract!(inputs.iter().all(|x| x.len() == p), "inputs differ in dimension");
    contract!(targets.iter().all(|y| y.len() == q), "targets differ in dimension");

    let x = DMatrix::from_fn(n, p + 1, |i, j| if j < p { inputs[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(n, q, |i, j| targets[i][j]);

    let solution = if l2 == 0.0 {
        let svd = x.svd(true, true);
        let tol = svd.singular_values.max() * (n.max(p + 1) as f64) * f64::EPSILON;
        svd.solve(&y, tol).map_err(|e| Error::Domain(format!("pseudo-inverse failed: {e}")))?
    } else {
        let xt = x.transpose();
        let mut gram = &xt * &x;
        for j in 0..p {
            gram[(j, j)] += l2;
        }
        let rhs = &xt * &y;
        match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                let svd = gram.svd(true, true);
                let tol = svd.singular_values.max() * ((p + 1) as f64) * f64::EPSILON;
                svd.solve(&rhs, tol).map_err(|e| Error::Domain(format!("pseudo-inverse failed: {e}")))?
            }
        }
    };

    // solution is (p+1) x q; weights are q x p.
    let mut weights = DenseMatrix::zeros(q, p);
    let mut bias = vec![0.0; q];
    for o in 0..q {
        for j in 0..p {
            weights.set(o, j, solution[(j, o)]);
        }
        bias[o] = solution[(p, o)];
    }
    if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("least squares solution".into()));
    }
    Ok(LinearMap { weights, bias })
}
