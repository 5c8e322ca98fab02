use crate::error::{contract, Result};
use crate::numerics::{least_squares_fit, sq_dist, LinearMap};
use crate::sentence_encoder::Encoder;

/// A fitted Φ -> Ψ map with its fit statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerMapFit {
    pub map: LinearMap,
    /// Mean of `|M(Φ(x)) - Ψ(x)|^2` over the auxiliary sentences.
    pub residual: f64,
    /// Mean of `|Ψ(x) - mean Ψ|^2`, the residual of the best constant map.
    pub target_variance: f64,
}

/// Least-squares map from top-level embeddings to word averages, fitted on
/// auxiliary sentences.
pub fn fit_lower_map(encoder: &Encoder, aux: &[Vec<usize>], l2: f64) -> Result<LowerMapFit> {
    contract!(!aux.is_empty(), "lower map needs auxiliary sentences");
    let mut inputs = Vec::with_capacity(aux.len());
    let mut targets = Vec::with_capacity(aux.len());
    for x in aux {
        inputs.push(encoder.encode(x)?);
        targets.push(encoder.encode_lower(x)?);
    }
    let map = least_squares_fit(&inputs, &targets, l2)?;
    let n = aux.len() as f64;
    let mut residual = 0.0;
    for (x, y) in inputs.iter().zip(&targets) {
        residual += sq_dist(&map.apply(x)?, y);
    }
    let d = targets[0].len();
    let mean: Vec<f64> = (0..d).map(|k| targets.iter().map(|t| t[k]).sum::<f64>() / n).collect();
    let target_variance = targets.iter().map(|t| sq_dist(t, &mean)).sum::<f64>() / n;
    Ok(LowerMapFit {
        map,
        residual: residual / n,
        target_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::stream;
    use crate::numerics::DenseMatrix;
    use crate::sentence_encoder::{Arch, EncoderConfig, Reducer};
    use rand::Rng;

    fn sentences(n: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = stream(seed, 0);
        (0..n)
            .map(|_| {
                let l = rng.random_range(1..=8);
                (0..l).map(|_| rng.random_range(1..vocab)).collect()
            })
            .collect()
    }

    #[test]
    fn mean_pool_map_is_identity() {
        let cfg = EncoderConfig {
            d_w: 10,
            ..Default::default()
        };
        let enc = Encoder::init(40, &cfg);
        let fit = fit_lower_map(&enc, &sentences(100, 40, 1), 0.0).unwrap();
        assert!(fit.residual < 1e-8);
        assert!(fit.map.weights.max_abs_diff(&DenseMatrix::identity(10)) < 1e-6);
    }

    #[test]
    fn single_sentence_is_fit_exactly() {
        let enc = Encoder::init(
            30,
            &EncoderConfig {
                arch: Arch::Recurrent,
                d_w: 6,
                hidden: 8,
                ..Default::default()
            },
        );
        let fit = fit_lower_map(&enc, &sentences(1, 30, 2), 0.0).unwrap();
        assert!(fit.residual < 1e-16);
        assert!(fit_lower_map(&enc, &[], 0.0).is_err());
    }

    #[test]
    fn recurrent_map_explains_signal() {
        let enc = Encoder::init(
            200,
            &EncoderConfig {
                arch: Arch::Recurrent,
                reducer: Reducer::Mean,
                d_w: 16,
                hidden: 32,
                ..Default::default()
            },
        );
        let fit = fit_lower_map(&enc, &sentences(10_000, 200, 3), 1e-6).unwrap();
        assert!(fit.residual < fit.target_variance, "{} vs {}", fit.residual, fit.target_variance);
    }
}
