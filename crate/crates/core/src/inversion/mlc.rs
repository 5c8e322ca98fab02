use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::UNK;
use crate::error::{contract, Result};
use crate::numerics::rng::{stream, streams};
use crate::numerics::{dot, ensure_finite, sigmoid, AdamGroup, DenseMatrix, ParamBlocks};

use super::{InversionSample, WordSetPrediction};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` inside the loss.
const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlcConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for MlcConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.001,
            batch_size: 256,
            threshold: 0.5,
            seed: 0,
        }
    }
}

/// One logistic model per vocabulary word over embedding features.
#[derive(Debug, Clone, PartialEq)]
pub struct MlcModel {
    /// `|V| x d`
    pub w: DenseMatrix,
    /// `1 x |V|`
    pub b: DenseMatrix,
    pub threshold: f64,
}

impl ParamBlocks for MlcModel {
    fn blocks(&self) -> Vec<&DenseMatrix> {
        vec![&self.w, &self.b]
    }

    fn blocks_mut(&mut self) -> Vec<&mut DenseMatrix> {
        vec![&mut self.w, &mut self.b]
    }
}

impl MlcModel {
    pub fn zeros(vocab_size: usize, d: usize) -> Self {
        Self {
            w: DenseMatrix::zeros(vocab_size, d),
            b: DenseMatrix::zeros(1, vocab_size),
            threshold: 0.5,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.w.rows()
    }

    pub fn d(&self) -> usize {
        self.w.cols()
    }

    /// Per-word probabilities; the unknown word is fixed at 0.
    pub fn probabilities(&self, phi: &[f64]) -> Result<Vec<f64>> {
        contract!(phi.len() == self.d(), "embedding has dimension {}, inverter expects {}", phi.len(), self.d());
        let b = self.b.as_slice();
        let mut p: Vec<f64> = (0..self.vocab_size()).map(|w| sigmoid(dot(self.w.row(w), phi) + b[w])).collect();
        p[UNK] = 0.0;
        Ok(p)
    }

    pub fn predict_with_threshold(&self, phi: &[f64], threshold: f64) -> Result<WordSetPrediction> {
        let mut out = WordSetPrediction::default();
        for (w, p) in self.probabilities(phi)?.into_iter().enumerate() {
            if w != UNK && p >= threshold {
                out.insert(w, p);
            }
        }
        Ok(out)
    }

    pub fn predict(&self, phi: &[f64]) -> Result<WordSetPrediction> {
        self.predict_with_threshold(phi, self.threshold)
    }
}

fn word_bce(p: f64, y: bool) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean over samples of the summed per-word binary cross-entropy.
pub fn mlc_loss(model: &MlcModel, samples: &[InversionSample]) -> Result<f64> {
    contract!(!samples.is_empty(), "mlc loss needs samples");
    let mut total = 0.0;
    for s in samples {
        let p = model.probabilities(&s.embedding)?;
        for (w, &pw) in p.iter().enumerate().skip(1) {
            total += word_bce(pw, s.words.contains(&w));
        }
    }
    Ok(total / samples.len() as f64)
}

/// Batch loss and gradient, accumulated into `grad`.
pub(crate) fn mlc_batch_grad(model: &MlcModel, batch: &[&InversionSample], grad: &mut MlcModel, scale: f64) -> Result<f64> {
    let mut total = 0.0;
    let inv_b = scale / batch.len() as f64;
    for s in batch {
        let p = model.probabilities(&s.embedding)?;
        let gb = grad.b.as_mut_slice();
        let mut dl = vec![0.0; p.len()];
        for (w, &pw) in p.iter().enumerate().skip(1) {
            let y = s.words.contains(&w);
            total += word_bce(pw, y);
            dl[w] = (pw - if y { 1.0 } else { 0.0 }) * inv_b;
            gb[w] += dl[w];
        }
        grad.w.add_outer(1.0, &dl, &s.embedding);
    }
    Ok(total / batch.len() as f64)
}

/// Fits the per-word logistic bank with minibatch Adam.
pub fn train_mlc(samples: &[InversionSample], vocab_size: usize, cfg: &MlcConfig) -> Result<MlcModel> {
    contract!(!samples.is_empty(), "mlc training needs auxiliary samples");
    contract!(cfg.batch_size > 0, "batch size must be positive");
    let d = samples[0].embedding.len();
    let mut model = MlcModel::zeros(vocab_size, d);
    model.threshold = cfg.threshold;
    // start each bias at the word's log-odds in the auxiliary data
    let n = samples.len() as f64;
    let mut freq = vec![0.0; vocab_size];
    for s in samples {
        contract!(s.embedding.len() == d, "auxiliary embeddings differ in dimension");
        for &w in &s.words {
            contract!(w < vocab_size, "word id {w} outside vocabulary of {vocab_size}");
            freq[w] += 1.0;
        }
    }
    for (b, f) in model.b.as_mut_slice().iter_mut().zip(&freq) {
        let q = (f + 0.5) / (n + 1.0);
        *b = (q / (1.0 - q)).ln();
    }
    let mut opt = AdamGroup::new(&model, cfg.lr);
    let mut grad = MlcModel::zeros(vocab_size, d);
    let mut rng = stream(cfg.seed, streams::INVERTER_SHUFFLE);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&InversionSample> = chunk.iter().map(|&i| &samples[i]).collect();
            grad.zero_grad();
            let loss = mlc_batch_grad(&model, &batch, &mut grad, 1.0)?;
            ensure_finite(loss, "mlc loss")?;
            opt.step(&mut model, &grad)?;
        }
    }
    Ok(model)
}
