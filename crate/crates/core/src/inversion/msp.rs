use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::UNK;
use crate::error::{contract, Result};
use crate::numerics::rng::{stream, streams};
use crate::numerics::{ensure_finite, log_sum_exp, AdamGroup, DenseMatrix, ParamBlocks};
use crate::sentence_encoder::{GruParams, GruStep};

use super::{word_set_metrics, InversionSample, WordSetPrediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MspConfig {
    pub hidden: usize,
    /// Width of the previous-word input embedding.
    pub d_word: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Share of the samples held out for early stopping; 0 trains on all
    /// of them for the full schedule.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for MspConfig {
    fn default() -> Self {
        Self {
            hidden: 300,
            d_word: 64,
            epochs: 30,
            lr: 0.001,
            batch_size: 256,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Recurrent set predictor. The initial state is `tanh(W_e Φ + b_e)`; each
/// step reads the previously emitted word (or a start symbol).
#[derive(Debug, Clone, PartialEq)]
pub struct MspModel {
    /// `(|V| + 1) x d_word`; the last row is the start symbol.
    pub emb: DenseMatrix,
    pub w_e: DenseMatrix,
    pub b_e: DenseMatrix,
    pub gru: GruParams,
    /// `|V| x hidden`
    pub w_o: DenseMatrix,
    pub b_o: DenseMatrix,
}

impl ParamBlocks for MspModel {
    fn blocks(&self) -> Vec<&DenseMatrix> {
        vec![&self.emb, &self.w_e, &self.b_e, &self.gru.w, &self.gru.u, &self.gru.b, &self.w_o, &self.b_o]
    }

    fn blocks_mut(&mut self) -> Vec<&mut DenseMatrix> {
        vec![
            &mut self.emb,
            &mut self.w_e,
            &mut self.b_e,
            &mut self.gru.w,
            &mut self.gru.u,
            &mut self.gru.b,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }
}

struct StepCache {
    prev: usize,
    gru: GruStep,
    h: Vec<f64>,
    dlogits: Vec<f64>,
}

impl MspModel {
    pub fn init(vocab_size: usize, d: usize, cfg: &MspConfig) -> Self {
        let mut rng = stream(cfg.seed, streams::INVERTER_INIT);
        let a_e = 1.0 / (cfg.d_word as f64).sqrt();
        let a_in = 1.0 / (d as f64).sqrt();
        let a_h = 1.0 / (cfg.hidden as f64).sqrt();
        Self {
            emb: DenseMatrix::random_uniform(vocab_size + 1, cfg.d_word, -a_e, a_e, &mut rng),
            w_e: DenseMatrix::random_uniform(cfg.hidden, d, -a_in, a_in, &mut rng),
            b_e: DenseMatrix::zeros(1, cfg.hidden),
            gru: GruParams::init(cfg.d_word, cfg.hidden, &mut rng),
            w_o: DenseMatrix::random_uniform(vocab_size, cfg.hidden, -a_h, a_h, &mut rng),
            b_o: DenseMatrix::zeros(1, vocab_size),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            emb: self.emb.zeros_like(),
            w_e: self.w_e.zeros_like(),
            b_e: self.b_e.zeros_like(),
            gru: self.gru.zeros_like(),
            w_o: self.w_o.zeros_like(),
            b_o: self.b_o.zeros_like(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.w_o.rows()
    }

    pub fn d(&self) -> usize {
        self.w_e.cols()
    }

    fn start(&self) -> usize {
        self.vocab_size()
    }

    fn initial_state(&self, phi: &[f64]) -> Vec<f64> {
        let mut h = self.w_e.matvec(phi);
        for (v, b) in h.iter_mut().zip(self.b_e.as_slice()) {
            *v = (*v + b).tanh();
        }
        h
    }

    /// Masked log-probabilities for the next word; masked entries are -inf.
    fn log_probs(&self, h: &[f64], masked: &BTreeSet<usize>) -> Vec<f64> {
        let mut logits = self.w_o.matvec(h);
        for (v, b) in logits.iter_mut().zip(self.b_o.as_slice()) {
            *v += b;
        }
        logits[UNK] = f64::NEG_INFINITY;
        for &w in masked {
            logits[w] = f64::NEG_INFINITY;
        }
        let lse = log_sum_exp(&logits);
        logits.iter_mut().for_each(|v| *v -= lse);
        logits
    }

    /// `len` greedy steps; emitted words are masked from later steps.
    pub fn predict(&self, phi: &[f64], len: usize) -> Result<WordSetPrediction> {
        contract!(phi.len() == self.d(), "embedding has dimension {}, inverter expects {}", phi.len(), self.d());
        let mut out = WordSetPrediction::default();
        let mut h = self.initial_state(phi);
        let mut prev = self.start();
        for _ in 0..len.min(self.vocab_size() - 1) {
            h = self.gru.step(self.emb.row(prev), &h).0;
            let lp = self.log_probs(&h, &out.words);
            let mut best = usize::MAX;
            for (w, &v) in lp.iter().enumerate() {
                if v > f64::NEG_INFINITY && (best == usize::MAX || v > lp[best]) {
                    best = w;
                }
            }
            out.insert(best, lp[best].exp());
            prev = best;
        }
        Ok(out)
    }

    /// Loss of one sample; gradients (times `scale`) are added into `grad`.
    fn sample_loss(&self, s: &InversionSample, grad: Option<&mut MspModel>, scale: f64) -> Result<f64> {
        contract!(s.embedding.len() == self.d(), "embedding has dimension {}, inverter expects {}", s.embedding.len(), self.d());
        let h0 = self.initial_state(&s.embedding);
        let mut remaining = s.words.clone();
        remaining.remove(&UNK);
        let mut predicted = BTreeSet::new();
        let mut h = h0.clone();
        let mut prev = self.start();
        let ell = remaining.len();
        let mut steps = Vec::with_capacity(ell);
        let mut loss = 0.0;
        for _ in 0..ell {
            let (h_new, cache) = self.gru.step(self.emb.row(prev), &h);
            let lp = self.log_probs(&h_new, &predicted);
            let k = remaining.len() as f64;
            for &w in &remaining {
                contract!(w < self.vocab_size(), "word id {w} outside inverter vocabulary");
                loss -= lp[w] / k;
            }
            // the model's own greedy choice, right or wrong
            let mut best = usize::MAX;
            for (w, &v) in lp.iter().enumerate() {
                if v > f64::NEG_INFINITY && (best == usize::MAX || v > lp[best]) {
                    best = w;
                }
            }
            let mut dlogits: Vec<f64> = lp.iter().map(|v| v.exp() * scale).collect();
            for &w in &remaining {
                dlogits[w] -= scale / k;
            }
            steps.push(StepCache {
                prev,
                gru: cache,
                h: h_new.clone(),
                dlogits,
            });
            remaining.remove(&best);
            predicted.insert(best);
            prev = best;
            h = h_new;
            if remaining.is_empty() {
                break;
            }
        }
        let Some(g) = grad else {
            return Ok(loss);
        };
        let mut dh_next = vec![0.0; self.gru.hidden()];
        for st in steps.iter().rev() {
            let mut dh = self.w_o.t_matvec(&st.dlogits);
            for (a, b) in dh.iter_mut().zip(&dh_next) {
                *a += b;
            }
            g.w_o.add_outer(1.0, &st.dlogits, &st.h);
            for (a, b) in g.b_o.as_mut_slice().iter_mut().zip(&st.dlogits) {
                *a += b;
            }
            let mut dx = vec![0.0; self.emb.cols()];
            dh_next = self.gru.backward_step(self.emb.row(st.prev), &st.gru, &dh, &mut g.gru, &mut dx);
            for (a, b) in g.emb.row_mut(st.prev).iter_mut().zip(&dx) {
                *a += b;
            }
        }
        let dpre: Vec<f64> = dh_next.iter().zip(&h0).map(|(d, h)| d * (1.0 - h * h)).collect();
        g.w_e.add_outer(1.0, &dpre, &s.embedding);
        for (a, b) in g.b_e.as_mut_slice().iter_mut().zip(&dpre) {
            *a += b;
        }
        Ok(loss)
    }
}

/// Mean multi-set prediction loss over `samples` and its gradient.
pub fn msp_loss_grad(model: &MspModel, samples: &[&InversionSample]) -> Result<(f64, MspModel)> {
    contract!(!samples.is_empty(), "msp loss needs samples");
    let mut grad = model.zeros_like();
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    for s in samples {
        total += model.sample_loss(s, Some(&mut grad), scale)?;
    }
    Ok((total * scale, grad))
}

/// Trains the set predictor with minibatch Adam. Samples with an empty word
/// set are skipped. With `val_fraction > 0` a shuffled slice is held out and
/// the epoch with the highest held-out F1 is returned.
pub fn train_msp(samples: &[InversionSample], vocab_size: usize, cfg: &MspConfig) -> Result<MspModel> {
    let mut usable: Vec<&InversionSample> = samples.iter().filter(|s| s.words.iter().any(|&w| w != UNK)).collect();
    contract!(!usable.is_empty(), "msp training needs auxiliary samples");
    contract!(cfg.batch_size > 0, "batch size must be positive");
    contract!(vocab_size > 1, "vocabulary holds only the unknown word");
    contract!((0.0..1.0).contains(&cfg.val_fraction), "val_fraction must lie in [0, 1), got {}", cfg.val_fraction);
    let mut rng = stream(cfg.seed, streams::INVERTER_SHUFFLE);
    let n_val = (usable.len() as f64 * cfg.val_fraction).round() as usize;
    let val: Vec<&InversionSample> = if n_val > 0 && n_val < usable.len() {
        usable.shuffle(&mut rng);
        usable.drain(..n_val).collect()
    } else {
        Vec::new()
    };
    let mut model = MspModel::init(vocab_size, usable[0].embedding.len(), cfg);
    let mut opt = AdamGroup::new(&model, cfg.lr);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut best: Option<(f64, MspModel)> = None;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&InversionSample> = chunk.iter().map(|&i| usable[i]).collect();
            let (loss, grad) = msp_loss_grad(&model, &batch)?;
            ensure_finite(loss, "msp loss")?;
            opt.step(&mut model, &grad)?;
        }
        if !val.is_empty() {
            let mut f1 = 0.0;
            for s in &val {
                let words: BTreeSet<usize> = s.words.iter().copied().filter(|&w| w != UNK).collect();
                f1 += word_set_metrics(&model.predict(&s.embedding, words.len())?.words, &words)?.f1;
            }
            if best.as_ref().is_none_or(|b| f1 > b.0) {
                best = Some((f1, model.clone()));
            }
        }
    }
    Ok(best.map_or(model, |b| b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradient_check_report;
    use crate::numerics::rng::stream;
    use rand::Rng;

    fn small() -> MspModel {
        MspModel::init(
            10,
            4,
            &MspConfig {
                hidden: 6,
                d_word: 3,
                ..Default::default()
            },
        )
    }

    fn sample(e: Vec<f64>, w: &[usize]) -> InversionSample {
        InversionSample {
            embedding: e,
            words: w.iter().copied().collect(),
        }
    }

    #[test]
    fn uniform_first_step_costs_log_vocab() {
        // ten known words plus the unknown slot
        let mut m = MspModel::init(11, 4, &MspConfig { hidden: 6, d_word: 3, ..Default::default() });
        m.w_o.fill(0.0);
        let s = sample(vec![0.1; 4], &[2, 5]);
        let l = m.sample_loss(&s, None, 1.0).unwrap();
        // step 1: -(1/2)(log 0.1 + log 0.1) = log 10; step 2 is uniform over the 9 unmasked words
        let expected = 10f64.ln() + 9f64.ln();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn confident_single_word_has_zero_loss() {
        let mut m = small();
        m.w_o.fill(0.0);
        m.b_o.fill(-800.0);
        m.b_o.set(0, 3, 800.0);
        let l = m.sample_loss(&sample(vec![0.0; 4], &[3]), None, 1.0).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let base = small();
        let mut rng = stream(4, 4);
        let samples: Vec<InversionSample> = (0..3)
            .map(|_| {
                let e = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let w: Vec<usize> = (0..3).map(|_| rng.random_range(1..10)).collect();
                sample(e, &w)
            })
            .collect();
        let refs: Vec<&InversionSample> = samples.iter().collect();
        let flat = DenseMatrix::from_vec(1, base.num_params(), base.flatten()).unwrap();
        let mut f = |x: &DenseMatrix| {
            let mut m = base.clone();
            m.assign_flat(x.as_slice());
            let (l, g) = msp_loss_grad(&m, &refs).unwrap();
            (l, DenseMatrix::from_vec(1, g.num_params(), g.flatten()).unwrap())
        };
        let rep = gradient_check_report(&mut f, &flat, 3);
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn prediction_is_masked_and_sized() {
        let m = small();
        let phi = [0.3, -0.2, 0.5, 0.1];
        assert!(m.predict(&phi, 0).unwrap().is_empty());
        let p = m.predict(&phi, 5).unwrap();
        assert_eq!(p.len(), 5);
        assert!(!p.words.contains(&UNK));
        assert_eq!(m.predict(&phi, 50).unwrap().len(), 9);
        assert!(train_msp(&[sample(vec![0.0; 4], &[UNK])], 10, &MspConfig::default()).is_err());
    }

    #[test]
    fn learns_a_feature_coded_set() {
        let mut rng = stream(5, 5);
        let samples: Vec<InversionSample> = (0..300)
            .map(|_| {
                let e: Vec<f64> = (0..4).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
                let ws: Vec<usize> = (0..4).map(|k| if e[k] > 0.0 { 2 * k + 1 } else { 2 * k + 2 }).collect();
                sample(e, &ws)
            })
            .collect();
        let cfg = MspConfig {
            hidden: 16,
            d_word: 8,
            epochs: 60,
            lr: 0.02,
            batch_size: 32,
            val_fraction: 0.1,
            seed: 1,
        };
        let m = train_msp(&samples, 9, &cfg).unwrap();
        let mut f1 = 0.0;
        for s in &samples[..50] {
            let p = m.predict(&s.embedding, 4).unwrap();
            f1 += crate::inversion::word_set_metrics(&p.words, &s.words).unwrap().f1 / 50.0;
        }
        assert!(f1 > 0.9, "{f1}");
    }

    #[test]
    fn early_stopping_never_gets_worse_with_more_epochs() {
        let mut rng = stream(6, 6);
        // noise labels: longer training only memorises
        let samples: Vec<InversionSample> = (0..80)
            .map(|_| {
                let e: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                sample(e, &[rng.random_range(1..9), rng.random_range(1..9)])
            })
            .collect();
        let base = MspConfig {
            hidden: 8,
            d_word: 4,
            epochs: 1,
            lr: 0.05,
            batch_size: 8,
            val_fraction: 0.25,
            seed: 2,
        };
        // the same slice train_msp holds out
        let mut val: Vec<&InversionSample> = samples.iter().collect();
        val.shuffle(&mut stream(2, streams::INVERTER_SHUFFLE));
        val.truncate(20);
        let val_f1 = |m: &MspModel| {
            val.iter()
                .map(|s| crate::inversion::word_set_metrics(&m.predict(&s.embedding, s.words.len()).unwrap().words, &s.words).unwrap().f1)
                .sum::<f64>()
        };
        let best: Vec<f64> = (1..=10)
            .map(|e| val_f1(&train_msp(&samples, 9, &MspConfig { epochs: e, ..base.clone() }).unwrap()))
            .collect();
        for w in best.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{best:?}");
        }
        assert!(train_msp(&samples, 9, &MspConfig { val_fraction: 1.0, ..base }).is_err());
    }
}
