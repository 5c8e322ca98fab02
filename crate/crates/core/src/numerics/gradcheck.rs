use rand::seq::index::sample;

use crate::numerics::rng::{stream, streams};
use crate::numerics::DenseMatrix;

/// Maximum number of coordinates probed per check.
pub const MAX_PROBES: usize = 64;

/// Result of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub probed: usize,
}

/// Compares the analytic gradient returned by `f` against central
/// differences at `point`.
///
/// `f` returns `(value, gradient)`; the gradient must have the shape of its
/// argument. Step size is `1e-5 * (1 + |x_i|)`. The relative error of a
/// coordinate is `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)` and the maximum
/// over the probed coordinates is returned. When the parameter has more than
/// [`MAX_PROBES`] entries, three quarters of the probes go to coordinates with
/// a non-zero analytic gradient so sparse gradients are still exercised.
pub fn gradient_check<F>(mut f: F, point: &DenseMatrix) -> f64
where
    F: FnMut(&DenseMatrix) -> (f64, DenseMatrix),
{
    gradient_check_report(&mut f, point, 0).max_rel_error
}

pub fn gradient_check_report<F>(f: &mut F, point: &DenseMatrix, seed: u64) -> GradCheckReport
where
    F: FnMut(&DenseMatrix) -> (f64, DenseMatrix),
{
    let (_, analytic) = f(point);
    assert_eq!(analytic.shape(), point.shape(), "gradient shape must match parameter shape");
    let n = point.len();
    let probes = choose_probes(analytic.as_slice(), n, seed);

    let mut x = point.clone();
    let mut worst = (0.0f64, 0usize);
    for &i in &probes {
        let xi = point.as_slice()[i];
        let h = 1e-5 * (1.0 + xi.abs());
        x.as_mut_slice()[i] = xi + h;
        let (fp, _) = f(&x);
        x.as_mut_slice()[i] = xi - h;
        let (fm, _) = f(&x);
        x.as_mut_slice()[i] = xi;
        let numeric = (fp - fm) / (2.0 * h);
        let ga = analytic.as_slice()[i];
        let rel = (ga - numeric).abs() / (ga.abs() + numeric.abs()).max(1e-8);
        if rel > worst.0 || !rel.is_finite() {
            worst = (if rel.is_finite() { rel } else { f64::INFINITY }, i);
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        probed: probes.len(),
    }
}

fn choose_probes(grad: &[f64], n: usize, seed: u64) -> Vec<usize> {
    if n <= MAX_PROBES {
        return (0..n).collect();
    }
    let mut rng = stream(seed, streams::GRADCHECK);
    let nonzero: Vec<usize> = (0..n).filter(|&i| grad[i] != 0.0).collect();
    let take_nz = nonzero.len().min(MAX_PROBES * 3 / 4);
    let mut out: Vec<usize> = sample(&mut rng, nonzero.len(), take_nz)
        .into_iter()
        .map(|k| nonzero[k])
        .collect();
    let rest = MAX_PROBES - take_nz;
    out.extend(sample(&mut rng, n, rest).into_iter());
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_passes() {
        let x = DenseMatrix::from_vec(1, 5, vec![0.3, -1.2, 2.0, 0.0, 5.5]).unwrap();
        let err = gradient_check(|p| (0.5 * p.frobenius_sq(), p.clone()), &x);
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = DenseMatrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let err = gradient_check(
            |p| {
                let mut g = p.clone();
                g.scale(2.0);
                (0.5 * p.frobenius_sq(), g)
            },
            &x,
        );
        assert!(err > 0.1);
    }

    #[test]
    fn large_parameters_are_subsampled() {
        let x = DenseMatrix::from_vec(1, 1000, (0..1000).map(|i| i as f64 * 1e-3).collect()).unwrap();
        let mut calls = 0usize;
        let mut f = |p: &DenseMatrix| {
            calls += 1;
            (p.as_slice().iter().map(|v| v.sin()).sum::<f64>(), {
                let mut g = p.clone();
                g.as_mut_slice().iter_mut().for_each(|v| *v = v.cos());
                g
            })
        };
        let rep = gradient_check_report(&mut f, &x, 1);
        assert!(rep.probed <= MAX_PROBES);
        assert!(rep.max_rel_error < 1e-7);
    }
}
