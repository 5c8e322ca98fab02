use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::UNK;
use crate::error::{contract, domain, Result};
use crate::numerics::rng::{child_seed, stream, streams};
use crate::numerics::{dot, ensure_finite, softmax_in_place, sq_dist, AdamState, DenseMatrix, LinearMap};
use crate::sentence_encoder::Encoder;

use super::WordSetPrediction;

/// What the relaxed sequence is matched against.
#[derive(Debug, Clone, Copy)]
pub enum RelaxedObjective<'a> {
    /// `|Φ(softmax(Z/T) V) - Φ(x*)|^2`.
    Direct,
    /// `|mean_i softmax(Z_i/T) V - M(Φ(x*))|^2`.
    Lower(&'a LinearMap),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelaxedConfig {
    pub temperature: f64,
    pub lr: f64,
    pub max_steps: usize,
    /// Stop once the loss improved by less than this over `patience` steps.
    pub tol: f64,
    pub patience: usize,
    pub init_std: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for RelaxedConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            lr: 0.001,
            max_steps: 3000,
            tol: 1e-7,
            patience: 50,
            init_std: 0.01,
            restarts: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedOutcome {
    /// Hard-decoded sequence, one argmax per position.
    pub ids: Vec<usize>,
    /// Scores are the largest relaxed probability each word reached.
    pub prediction: WordSetPrediction,
    /// Relaxed loss at the accepted iterate.
    pub loss: f64,
    /// Loss of the hard-decoded sequence under the same objective.
    pub hard_loss: f64,
    pub steps: usize,
    /// Accepted loss after every step of the chosen restart; never increases.
    pub trace: Vec<f64>,
}

fn goal(encoder: &Encoder, target: &[f64], objective: RelaxedObjective<'_>) -> Result<Vec<f64>> {
    match objective {
        RelaxedObjective::Direct => {
            contract!(target.len() == encoder.d(), "target has dimension {}, encoder produces {}", target.len(), encoder.d());
            Ok(target.to_vec())
        }
        RelaxedObjective::Lower(m) => {
            contract!(m.d_out() == encoder.d_w(), "lower map outputs {} dims, words have {}", m.d_out(), encoder.d_w());
            m.apply(target)
        }
    }
}

fn probabilities(z: &DenseMatrix, temperature: f64) -> DenseMatrix {
    let mut p = z.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        row[UNK] = f64::NEG_INFINITY;
        softmax_in_place(row, temperature);
    }
    p
}

fn loss_grad_to_goal(
    encoder: &Encoder,
    z: &DenseMatrix,
    goal: &[f64],
    lower: bool,
    temperature: f64,
) -> (f64, DenseMatrix) {
    let v = &encoder.params.word;
    let (len, d_w) = (z.rows(), v.cols());
    let p = probabilities(z, temperature);
    let mut xs = DenseMatrix::zeros(len, d_w);
    for i in 0..len {
        xs.row_mut(i).copy_from_slice(&v.t_matvec(p.row(i)));
    }
    let (loss, dxs) = if lower {
        let mut mean = vec![0.0; d_w];
        for i in 0..len {
            for (m, x) in mean.iter_mut().zip(xs.row(i)) {
                *m += x / len as f64;
            }
        }
        let r: Vec<f64> = mean.iter().zip(goal).map(|(a, b)| a - b).collect();
        let mut dxs = DenseMatrix::zeros(len, d_w);
        for i in 0..len {
            for (d, rk) in dxs.row_mut(i).iter_mut().zip(&r) {
                *d = 2.0 * rk / len as f64;
            }
        }
        (dot(&r, &r), dxs)
    } else {
        let (phi, cache) = encoder.forward_vectors(&xs);
        let dphi: Vec<f64> = phi.iter().zip(goal).map(|(a, b)| 2.0 * (a - b)).collect();
        (sq_dist(&phi, goal), encoder.backward(&cache, &dphi, None))
    };
    let mut dz = DenseMatrix::zeros(len, z.cols());
    let inv_t = 1.0 / temperature;
    for i in 0..len {
        let dp = v.matvec(dxs.row(i));
        let pi = p.row(i);
        let centre = dot(pi, &dp);
        for (j, g) in dz.row_mut(i).iter_mut().enumerate() {
            *g = inv_t * pi[j] * (dp[j] - centre);
        }
    }
    (loss, dz)
}

/// Relaxed inversion loss and its gradient with respect to the logits `z`
/// (`len x |V|`). The unknown-word column is masked out.
pub fn relaxed_loss_grad(
    encoder: &Encoder,
    z: &DenseMatrix,
    target: &[f64],
    objective: RelaxedObjective<'_>,
    temperature: f64,
) -> Result<(f64, DenseMatrix)> {
    domain!(temperature > 0.0, "relaxation temperature must be positive, got {temperature}");
    contract!(z.cols() == encoder.vocab_size(), "logits have {} columns, vocabulary has {}", z.cols(), encoder.vocab_size());
    domain!(z.rows() > 0, "relaxed sequence must have positive length");
    let g = goal(encoder, target, objective)?;
    Ok(loss_grad_to_goal(encoder, z, &g, matches!(objective, RelaxedObjective::Lower(_)), temperature))
}

fn hard_loss(encoder: &Encoder, ids: &[usize], goal: &[f64], lower: bool) -> Result<f64> {
    let e = if lower { encoder.encode_lower(ids)? } else { encoder.encode(ids)? };
    Ok(sq_dist(&e, goal))
}

fn argmax_decode(z: &DenseMatrix) -> Vec<usize> {
    (0..z.rows())
        .map(|i| {
            let row = z.row(i);
            let mut best = usize::MAX;
            for (j, &v) in row.iter().enumerate() {
                if j == UNK {
                    continue;
                }
                if best == usize::MAX || v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Gradient-based white-box inversion of `target` into `len` words.
///
/// Each step is accepted only if the loss does not increase; rejected steps
/// halve the step size. Among restarts the one whose hard decoding fits best
/// is kept.
pub fn invert_relaxed(
    encoder: &Encoder,
    target: &[f64],
    len: usize,
    objective: RelaxedObjective<'_>,
    cfg: &RelaxedConfig,
) -> Result<RelaxedOutcome> {
    domain!(len > 0, "inversion length must be positive");
    domain!(cfg.temperature > 0.0, "relaxation temperature must be positive");
    domain!(cfg.restarts > 0, "need at least one restart");
    contract!(encoder.vocab_size() > 1, "vocabulary holds only the unknown word");
    let g = goal(encoder, target, objective)?;
    let lower = matches!(objective, RelaxedObjective::Lower(_));
    let n = encoder.vocab_size();
    let mut best: Option<RelaxedOutcome> = None;
    for restart in 0..cfg.restarts {
        let mut rng = stream(child_seed(cfg.seed, restart as u64), streams::INVERSION);
        let mut z = DenseMatrix::zeros(len, n);
        for v in z.as_mut_slice() {
            *v = cfg.init_std * rng.sample::<f64, _>(StandardNormal);
        }
        let (mut loss, mut grad) = loss_grad_to_goal(encoder, &z, &g, lower, cfg.temperature);
        ensure_finite(loss, "relaxed inversion loss")?;
        let mut adam = AdamState::for_param(&z, cfg.lr);
        let mut scale = 1.0;
        let mut trace = vec![loss];
        let mut steps = 0;
        while steps < cfg.max_steps {
            steps += 1;
            let mut z_new = z.clone();
            let mut adam_new = adam.clone();
            adam_new.step_scaled(&mut z_new, &grad, scale)?;
            let (l_new, g_new) = loss_grad_to_goal(encoder, &z_new, &g, lower, cfg.temperature);
            if l_new.is_finite() && l_new <= loss {
                z = z_new;
                adam = adam_new;
                loss = l_new;
                grad = g_new;
                scale = (scale * 1.25).min(1.0);
            } else {
                scale *= 0.5;
            }
            trace.push(loss);
            let t = trace.len();
            if t > cfg.patience && trace[t - 1 - cfg.patience] - loss < cfg.tol {
                break;
            }
            if scale < 1e-10 {
                break;
            }
        }
        let ids = argmax_decode(&z);
        let hard = hard_loss(encoder, &ids, &g, lower)?;
        let p = probabilities(&z, cfg.temperature);
        let mut prediction = WordSetPrediction::default();
        for (i, &w) in ids.iter().enumerate() {
            prediction.insert(w, p.get(i, w));
        }
        let outcome = RelaxedOutcome {
            ids,
            prediction,
            loss,
            hard_loss: hard,
            steps,
            trace,
        };
        if best.as_ref().is_none_or(|b| outcome.hard_loss < b.hard_loss) {
            best = Some(outcome);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Exhaustive minimiser of the hard objective over all sequences of `len`
/// known words. Exponential in `len`; meant as a test oracle.
pub fn exhaustive_inversion(
    encoder: &Encoder,
    target: &[f64],
    len: usize,
    objective: RelaxedObjective<'_>,
) -> Result<(Vec<usize>, f64)> {
    domain!(len > 0, "inversion length must be positive");
    let n = encoder.vocab_size();
    contract!(n > 1, "vocabulary holds only the unknown word");
    contract!((n as f64).powi(len as i32) <= 5e6, "exhaustive search over {n}^{len} sequences is too large");
    let g = goal(encoder, target, objective)?;
    let lower = matches!(objective, RelaxedObjective::Lower(_));
    let mut ids = vec![1usize; len];
    let mut best = (ids.clone(), f64::INFINITY);
    loop {
        let l = hard_loss(encoder, &ids, &g, lower)?;
        if l < best.1 {
            best = (ids.clone(), l);
        }
        let mut k = 0;
        loop {
            if k == len {
                return Ok(best);
            }
            ids[k] += 1;
            if ids[k] < n {
                break;
            }
            ids[k] = 1;
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use crate::numerics::gradient_check;
    use crate::numerics::least_squares_fit;
    use crate::sentence_encoder::{Arch, EncoderConfig, Reducer};

    fn encoder(arch: Arch, reducer: Reducer, vocab: usize, d_w: usize, seed: u64) -> Encoder {
        let mut e = Encoder::init(
            vocab,
            &EncoderConfig {
                arch,
                reducer,
                d_w,
                hidden: 8,
                seed,
                ..Default::default()
            },
        );
        // unit-norm rows make words well separated
        let w = &mut e.params.word;
        for r in 0..w.rows() {
            let n = crate::numerics::norm(w.row(r));
            w.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        e
    }

    fn random_logits(len: usize, n: usize, seed: u64) -> DenseMatrix {
        let mut rng = stream(seed, streams::GRADCHECK);
        DenseMatrix::random_normal(len, n, 0.5, &mut rng)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (arch, reducer) in [(Arch::MeanPool, Reducer::Mean), (Arch::Recurrent, Reducer::Mean), (Arch::Recurrent, Reducer::Last)] {
            let e = encoder(arch, reducer, 9, 5, 3);
            let target = e.encode(&[2, 5, 7]).unwrap();
            let z = random_logits(3, 9, 4);
            let err = gradient_check(|z| relaxed_loss_grad(&e, z, &target, RelaxedObjective::Direct, 0.5).unwrap(), &z);
            assert!(err < 1e-4, "{arch:?}/{reducer:?}: {err}");
        }
        let e = encoder(Arch::Recurrent, Reducer::Mean, 9, 5, 3);
        let map = LinearMap::identity(5);
        let m = LinearMap {
            weights: DenseMatrix::random_normal(5, 8, 0.3, &mut stream(1, 1)),
            bias: vec![0.1; 5],
        };
        let target = e.encode(&[1, 4]).unwrap();
        let z = random_logits(2, 9, 5);
        let err = gradient_check(|z| relaxed_loss_grad(&e, z, &target, RelaxedObjective::Lower(&m), 0.3).unwrap(), &z);
        assert!(err < 1e-4, "lower: {err}");
        assert!(relaxed_loss_grad(&e, &z, &target, RelaxedObjective::Lower(&map), 0.3).is_err());
    }

    #[test]
    fn unknown_column_gets_no_mass() {
        let e = encoder(Arch::MeanPool, Reducer::Mean, 6, 4, 0);
        let mut z = random_logits(2, 6, 1);
        z.set(0, UNK, 100.0);
        let p = probabilities(&z, 0.05);
        assert_eq!(p.get(0, UNK), 0.0);
        let (_, g) = relaxed_loss_grad(&e, &z, &e.encode(&[1]).unwrap(), RelaxedObjective::Direct, 0.05).unwrap();
        assert_eq!(g.get(0, UNK), 0.0);
        assert!(relaxed_loss_grad(&e, &z, &[0.0; 4], RelaxedObjective::Direct, 0.0).is_err());
    }

    #[test]
    fn trace_is_monotone_and_recovers_words() {
        let e = encoder(Arch::MeanPool, Reducer::Mean, 15, 16, 7);
        let truth = [3usize, 9, 12];
        let target = e.encode(&truth).unwrap();
        let out = invert_relaxed(
            &e,
            &target,
            3,
            RelaxedObjective::Direct,
            &RelaxedConfig {
                restarts: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(out.prediction.words, truth.iter().copied().collect());
        let (oracle, l) = exhaustive_inversion(&e, &target, 3, RelaxedObjective::Direct).unwrap();
        assert!(l < 1e-20);
        assert_eq!(oracle.iter().copied().collect::<BTreeSet<_>>(), out.prediction.words);
    }

    #[test]
    fn lower_objective_inverts_recurrent_encoder() {
        let e = encoder(Arch::Recurrent, Reducer::Mean, 15, 16, 11);
        let mut rng = stream(2, 2);
        let aux: Vec<Vec<usize>> = (0..400).map(|_| (0..3).map(|_| rng.random_range(1..15)).collect()).collect();
        let inputs: Vec<Vec<f64>> = aux.iter().map(|x| e.encode(x).unwrap()).collect();
        let targets: Vec<Vec<f64>> = aux.iter().map(|x| e.encode_lower(x).unwrap()).collect();
        let m = least_squares_fit(&inputs, &targets, 1e-6).unwrap();
        let out = invert_relaxed(
            &e,
            &e.encode(&[2, 6, 10]).unwrap(),
            3,
            RelaxedObjective::Lower(&m),
            &RelaxedConfig {
                restarts: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.hard_loss.is_finite());
    }

    #[test]
    fn planted_relaxation_has_zero_loss() {
        let e = encoder(Arch::Recurrent, Reducer::Last, 10, 4, 2);
        let mut z0 = DenseMatrix::zeros(3, 10);
        for (i, w) in [2usize, 5, 8].iter().enumerate() {
            z0.set(i, *w, 1.0);
        }
        let p = probabilities(&z0, 0.05);
        let mut xs = DenseMatrix::zeros(3, 4);
        for i in 0..3 {
            xs.row_mut(i).copy_from_slice(&e.params.word.t_matvec(p.row(i)));
        }
        let target = e.encode_from_vectors(&xs).unwrap();
        let (l, _) = relaxed_loss_grad(&e, &z0, &target, RelaxedObjective::Direct, 0.05).unwrap();
        assert!(l < 1e-24, "{l}");
    }

    #[test]
    fn single_word_is_recovered() {
        let e = encoder(Arch::MeanPool, Reducer::Mean, 20, 8, 4);
        for w in [1usize, 7, 19] {
            let out = invert_relaxed(&e, &e.encode(&[w]).unwrap(), 1, RelaxedObjective::Direct, &RelaxedConfig::default()).unwrap();
            assert_eq!(out.prediction.words, BTreeSet::from([w]));
        }
    }

    #[test]
    fn three_word_targets_over_fifty_words() {
        let e = encoder(Arch::MeanPool, Reducer::Mean, 51, 100, 9);
        let mut rng = stream(3, 3);
        let mut f1 = 0.0;
        for k in 0..50 {
            let mut truth = BTreeSet::new();
            while truth.len() < 3 {
                truth.insert(rng.random_range(1..51));
            }
            let x: Vec<usize> = truth.iter().copied().collect();
            let cfg = RelaxedConfig {
                seed: k,
                ..Default::default()
            };
            let out = invert_relaxed(&e, &e.encode(&x).unwrap(), 3, RelaxedObjective::Direct, &cfg).unwrap();
            f1 += crate::inversion::word_set_metrics(&out.prediction.words, &truth).unwrap().f1 / 50.0;
        }
        assert!(f1 >= 0.9, "{f1}");
    }
}
