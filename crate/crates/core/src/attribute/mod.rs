//! Few-shot attribute inference from embeddings, plus a from-scratch text
//! classifier for comparison.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::rng::{stream, streams};
use crate::numerics::{dot, ensure_finite, log_sum_exp, softmax_in_place, AdamGroup, DenseMatrix, ParamBlocks};

mod textcnn;

pub use textcnn::{train_baseline_classifier, TextCnn, TextCnnConfig};

/// Embeddings labelled with an attribute class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledEmbeddingSet {
    pub items: Vec<(Vec<f64>, usize)>,
    /// Class names; the class id is the index.
    pub classes: Vec<String>,
}

impl LabeledEmbeddingSet {
    pub fn per_class_count(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for (_, s) in &self.items {
            if *s < c.len() {
                c[*s] += 1;
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    /// Plain full-batch gradient descent; used where rotation invariance of
    /// the fitted model matters.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.001,
            batch_size: 128,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression over embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeClassifier {
    /// `|S| x d`
    pub weights: DenseMatrix,
    /// `1 x |S|`
    pub bias: DenseMatrix,
}

impl ParamBlocks for AttributeClassifier {
    fn blocks(&self) -> Vec<&DenseMatrix> {
        vec![&self.weights, &self.bias]
    }

    fn blocks_mut(&mut self) -> Vec<&mut DenseMatrix> {
        vec![&mut self.weights, &mut self.bias]
    }
}

impl AttributeClassifier {
    pub fn zeros(n_classes: usize, d: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(n_classes, d),
            bias: DenseMatrix::zeros(1, n_classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn d(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, e: &[f64]) -> Result<Vec<f64>> {
        contract!(e.len() == self.d(), "embedding has dimension {}, classifier expects {}", e.len(), self.d());
        let b = self.bias.as_slice();
        Ok((0..self.n_classes()).map(|s| dot(self.weights.row(s), e) + b[s]).collect())
    }

    /// Mean cross-entropy of a batch; gradients times `scale` are added into `grad`.
    pub(crate) fn batch_grad(&self, batch: &[(&[f64], usize)], grad: &mut AttributeClassifier, scale: f64) -> Result<f64> {
        let inv = scale / batch.len() as f64;
        let mut total = 0.0;
        for &(e, s) in batch {
            let mut p = self.logits(e)?;
            total += log_sum_exp(&p) - p[s];
            softmax_in_place(&mut p, 1.0);
            p[s] -= 1.0;
            p.iter_mut().for_each(|v| *v *= inv);
            grad.weights.add_outer(1.0, &p, e);
            for (g, d) in grad.bias.as_mut_slice().iter_mut().zip(&p) {
                *g += d;
            }
        }
        Ok(total / batch.len() as f64)
    }
}

/// Classes sorted by descending score, ties broken by class id.
pub fn rank_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Fits the probe from zero initialisation.
pub fn train_attribute_classifier(aux: &LabeledEmbeddingSet, cfg: &AttributeConfig) -> Result<AttributeClassifier> {
    contract!(!aux.classes.is_empty(), "attribute task needs at least one class");
    for (s, n) in aux.per_class_count().iter().enumerate() {
        contract!(*n > 0, "class {} has no labelled examples", aux.classes[s]);
    }
    let d = aux.items[0].0.len();
    for (e, s) in &aux.items {
        contract!(e.len() == d, "labelled embeddings differ in dimension");
        contract!(*s < aux.classes.len(), "class id {s} out of range");
    }
    let k = aux.classes.len();
    let mut model = AttributeClassifier::zeros(k, d);
    let mut grad = AttributeClassifier::zeros(k, d);
    let items: Vec<(&[f64], usize)> = aux.items.iter().map(|(e, s)| (e.as_slice(), *s)).collect();
    match cfg.optimizer {
        Optimizer::Adam => {
            let mut opt = AdamGroup::new(&model, cfg.lr);
            let mut rng = stream(cfg.seed, streams::ATTRIBUTE);
            let mut order: Vec<usize> = (0..items.len()).collect();
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size.max(1)) {
                    let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| items[i]).collect();
                    grad.zero_grad();
                    ensure_finite(model.batch_grad(&batch, &mut grad, 1.0)?, "attribute loss")?;
                    opt.step(&mut model, &grad)?;
                }
            }
        }
        Optimizer::Sgd => {
            for _ in 0..cfg.epochs {
                grad.zero_grad();
                ensure_finite(model.batch_grad(&items, &mut grad, 1.0)?, "attribute loss")?;
                model.weights.add_scaled(-cfg.lr, &grad.weights)?;
                model.bias.add_scaled(-cfg.lr, &grad.bias)?;
            }
        }
    }
    Ok(model)
}

/// Ranked class list for one embedding.
pub fn infer_attribute(f: &AttributeClassifier, e: &[f64]) -> Result<Vec<usize>> {
    Ok(rank_scores(&f.logits(e)?))
}

/// Fraction of items whose truth is among the first `k` ranks.
pub fn top_k_accuracy(predictions: &[Vec<usize>], truths: &[usize], k: usize) -> Result<f64> {
    contract!(k >= 1, "top-k needs k >= 1");
    contract!(predictions.len() == truths.len(), "{} rankings for {} truths", predictions.len(), truths.len());
    if truths.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p.iter().take(k).any(|c| c == *t)).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// A balanced few-shot split: `aux` holds `n_aux` items per class and
/// `target` holds `n_target` disjoint items per class.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTask<T> {
    pub classes: Vec<String>,
    pub aux: Vec<(T, usize)>,
    pub target: Vec<(T, usize)>,
}

/// Samples `n_classes` groups having at least `n_aux + n_target` items, then
/// a disjoint aux/target split inside each.
pub fn sample_attribute_task<T: Clone>(
    groups: &[(String, Vec<T>)],
    n_classes: usize,
    n_aux: usize,
    n_target: usize,
    seed: u64,
) -> Result<AttributeTask<T>> {
    let mut eligible: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].1.len() >= n_aux + n_target).collect();
    contract!(
        eligible.len() >= n_classes,
        "only {} groups have {} items, {} classes requested",
        eligible.len(),
        n_aux + n_target,
        n_classes
    );
    let mut rng = stream(seed, streams::ATTRIBUTE);
    eligible.shuffle(&mut rng);
    eligible.truncate(n_classes);
    eligible.sort_unstable();
    let mut task = AttributeTask {
        classes: Vec::with_capacity(n_classes),
        aux: Vec::new(),
        target: Vec::new(),
    };
    for (s, &g) in eligible.iter().enumerate() {
        let (name, items) = &groups[g];
        task.classes.push(name.clone());
        let mut idx: Vec<usize> = (0..items.len()).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..n_aux] {
            task.aux.push((items[i].clone(), s));
        }
        for &i in &idx[n_aux..n_aux + n_target] {
            task.target.push((items[i].clone(), s));
        }
    }
    Ok(task)
}
