use serde::{Deserialize, Serialize};

use crate::corpus::UNK;
use crate::error::{contract, domain, Result};
use crate::numerics::{dot, ensure_finite, AdamState, DenseMatrix, LinearMap};
use crate::sentence_encoder::Encoder;

use super::WordSetPrediction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparseConfig {
    /// l1 weight.
    pub lambda: f64,
    /// Words with coefficient at or above this are returned.
    pub tau: f64,
    pub lr: f64,
    pub max_steps: usize,
    pub tol: f64,
    pub patience: usize,
}

impl Default for SparseConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            tau: 0.01,
            lr: 0.001,
            max_steps: 5000,
            tol: 1e-9,
            patience: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseOutcome {
    /// Scores are the coefficients.
    pub prediction: WordSetPrediction,
    pub coefficients: Vec<f64>,
    pub loss: f64,
    pub steps: usize,
}

/// `|V^T z - m|^2 + lambda |z|_1` and its gradient on the non-negative
/// orthant, `2 V (V^T z - m) + lambda`.
pub fn sparse_loss_grad(v: &DenseMatrix, z: &[f64], m: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    contract!(z.len() == v.rows(), "coefficients have {} entries, vocabulary has {}", z.len(), v.rows());
    contract!(m.len() == v.cols(), "target has dimension {}, words have {}", m.len(), v.cols());
    let mut r = v.t_matvec(z);
    for (a, b) in r.iter_mut().zip(m) {
        *a -= b;
    }
    let l1: f64 = z.iter().map(|c| c.abs()).sum();
    let mut g = v.matvec(&r);
    for (gi, zi) in g.iter_mut().zip(z) {
        *gi = 2.0 * *gi + lambda * if *zi < 0.0 { -1.0 } else { 1.0 };
    }
    Ok((dot(&r, &r) + lambda * l1, g))
}

/// Non-negative sparse decomposition of `m` over the rows of `v`.
/// The unknown word keeps a zero coefficient.
pub fn invert_sparse(v: &DenseMatrix, m: &[f64], cfg: &SparseConfig) -> Result<SparseOutcome> {
    domain!(cfg.lambda >= 0.0, "l1 weight must be non-negative, got {}", cfg.lambda);
    domain!(cfg.tau > 0.0, "selection threshold must be positive, got {}", cfg.tau);
    contract!(v.rows() > 1, "vocabulary holds only the unknown word");
    let n = v.rows();
    let mut z = DenseMatrix::zeros(1, n);
    let mut adam = AdamState::for_param(&z, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.max_steps + 1);
    let mut steps = 0;
    let mut loss;
    loop {
        let (l, g) = sparse_loss_grad(v, z.as_slice(), m, cfg.lambda)?;
        loss = ensure_finite(l, "sparse inversion loss")?;
        trace.push(loss);
        let t = trace.len();
        if steps == cfg.max_steps || (t > cfg.patience && (trace[t - 1 - cfg.patience] - loss).abs() < cfg.tol) {
            break;
        }
        steps += 1;
        adam.step(&mut z, &DenseMatrix::from_vec(1, n, g)?)?;
        let zs = z.as_mut_slice();
        zs.iter_mut().for_each(|c| *c = c.max(0.0));
        zs[UNK] = 0.0;
    }
    let coefficients = z.into_vec();
    let mut prediction = WordSetPrediction::default();
    for (i, &c) in coefficients.iter().enumerate() {
        if i != UNK && c >= cfg.tau {
            prediction.insert(i, c);
        }
    }
    Ok(SparseOutcome {
        prediction,
        coefficients,
        loss,
        steps,
    })
}

/// Sparse inversion of a sentence embedding; `lower` maps it to a word
/// average first and is omitted for mean-pool encoders.
pub fn invert_sparse_sentence(
    encoder: &Encoder,
    target: &[f64],
    lower: Option<&LinearMap>,
    cfg: &SparseConfig,
) -> Result<SparseOutcome> {
    let m = match lower {
        Some(map) => map.apply(target)?,
        None => target.to_vec(),
    };
    invert_sparse(&encoder.params.word, &m, cfg)
}
