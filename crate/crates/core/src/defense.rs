//! Adversarial training of the dual encoder against word inversion and
//! attribute inference, and a utility probe to price it.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attribute::{infer_attribute, train_attribute_classifier, AttributeClassifier, AttributeConfig, LabeledEmbeddingSet};
use crate::corpus::{SentencePair, Vocabulary};
use crate::error::{contract, domain, Result};
use crate::inversion::{word_set, MlcModel};
use crate::numerics::{dot, log_sum_exp, sigmoid, softmax_in_place, AdamGroup, DenseMatrix, ParamBlocks};
use crate::sentence_encoder::{train_dual_encoder_with, BatchAdversary, EncoderConfig, SentenceEncoderModel, TrainStats};

const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    pub lambda_w: f64,
    pub lambda_s: f64,
    pub encoder: EncoderConfig,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            lambda_w: 0.0,
            lambda_s: 0.0,
            encoder: EncoderConfig::default(),
        }
    }
}

/// Simulated adversary trained jointly with the encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum AdversaryHead {
    WordMlc(MlcModel),
    Attribute(AttributeClassifier),
}

/// MLC head predicting the words of Φ(x_b).
pub struct WordAdversary {
    pub head: MlcModel,
    grad: MlcModel,
    opt: AdamGroup,
    lambda: f64,
    targets: Vec<BTreeSet<usize>>,
}

impl WordAdversary {
    /// `targets[i]` is the word set of the positive side of pair `i`.
    pub fn new(vocab_size: usize, d: usize, lambda: f64, lr: f64, targets: Vec<BTreeSet<usize>>) -> Result<Self> {
        domain!(lambda >= 0.0, "lambda_w must be non-negative, got {lambda}");
        let head = MlcModel::zeros(vocab_size, d);
        Ok(Self {
            grad: head.clone(),
            opt: AdamGroup::new(&head, lr),
            head,
            lambda,
            targets,
        })
    }
}

impl BatchAdversary for WordAdversary {
    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn forward_backward(&mut self, e: &DenseMatrix, items: &[usize]) -> Result<(f64, DenseMatrix)> {
        contract!(e.rows() == items.len(), "adversary got {} embeddings for {} items", e.rows(), items.len());
        self.grad.zero_grad();
        let inv = 1.0 / items.len() as f64;
        let mut de = e.zeros_like();
        let mut total = 0.0;
        for (r, &i) in items.iter().enumerate() {
            contract!(i < self.targets.len(), "pair index {i} has no word target");
            let phi = e.row(r);
            let p = self.head.probabilities(phi)?;
            let mut dl = vec![0.0; p.len()];
            for (w, &pw) in p.iter().enumerate().skip(1) {
                let y = self.targets[i].contains(&w);
                let pc = pw.clamp(P_CLAMP, 1.0 - P_CLAMP);
                total -= if y { pc.ln() } else { (1.0 - pc).ln() };
                dl[w] = (pw - if y { 1.0 } else { 0.0 }) * inv;
            }
            for (g, d) in self.grad.b.as_mut_slice().iter_mut().zip(&dl) {
                *g += d;
            }
            self.grad.w.add_outer(1.0, &dl, phi);
            de.row_mut(r).copy_from_slice(&self.head.w.t_matvec(&dl));
        }
        Ok((total * inv, de))
    }

    fn step(&mut self) -> Result<()> {
        self.opt.step(&mut self.head, &self.grad)
    }
}

/// Softmax head predicting the attribute class of each pair.
pub struct AttributeAdversary {
    pub head: AttributeClassifier,
    grad: AttributeClassifier,
    opt: AdamGroup,
    lambda: f64,
    labels: Vec<usize>,
}

impl AttributeAdversary {
    pub fn new(n_classes: usize, d: usize, lambda: f64, lr: f64, labels: Vec<usize>) -> Result<Self> {
        domain!(lambda >= 0.0, "lambda_s must be non-negative, got {lambda}");
        contract!(labels.iter().all(|&s| s < n_classes), "attribute label out of range");
        let head = AttributeClassifier::zeros(n_classes, d);
        Ok(Self {
            grad: head.clone(),
            opt: AdamGroup::new(&head, lr),
            head,
            lambda,
            labels,
        })
    }
}

impl BatchAdversary for AttributeAdversary {
    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn forward_backward(&mut self, e: &DenseMatrix, items: &[usize]) -> Result<(f64, DenseMatrix)> {
        contract!(e.rows() == items.len(), "adversary got {} embeddings for {} items", e.rows(), items.len());
        self.grad.zero_grad();
        let inv = 1.0 / items.len() as f64;
        let mut de = e.zeros_like();
        let mut total = 0.0;
        for (r, &i) in items.iter().enumerate() {
            contract!(i < self.labels.len(), "pair index {i} has no attribute label");
            let s = self.labels[i];
            let phi = e.row(r);
            let mut p = self.head.logits(phi)?;
            total += log_sum_exp(&p) - p[s];
            softmax_in_place(&mut p, 1.0);
            p[s] -= 1.0;
            p.iter_mut().for_each(|v| *v *= inv);
            self.grad.weights.add_outer(1.0, &p, phi);
            for (g, d) in self.grad.bias.as_mut_slice().iter_mut().zip(&p) {
                *g += d;
            }
            de.row_mut(r).copy_from_slice(&self.head.weights.t_matvec(&p));
        }
        Ok((total * inv, de))
    }

    fn step(&mut self) -> Result<()> {
        self.opt.step(&mut self.head, &self.grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefendedModel {
    pub model: SentenceEncoderModel,
    pub head: Option<AdversaryHead>,
    pub stats: TrainStats,
}

/// Contrastive training with a reversal-coupled adversary. `lambda_s > 0`
/// needs one attribute label per pair and the class count.
///
/// Only one of `lambda_w`, `lambda_s` may be non-zero. With both zero
/// the result matches [`crate::sentence_encoder::train_dual_encoder`].
pub fn train_defended_encoder(
    pairs: &[SentencePair],
    vocab: &Vocabulary,
    cfg: &DefenseConfig,
    labels: Option<(&[usize], usize)>,
) -> Result<DefendedModel> {
    domain!(cfg.lambda_w >= 0.0 && cfg.lambda_s >= 0.0, "defense weights must be non-negative");
    contract!(cfg.lambda_w == 0.0 || cfg.lambda_s == 0.0, "vary one defense weight at a time");
    let enc = &cfg.encoder;
    let d = match enc.arch {
        crate::sentence_encoder::Arch::MeanPool => enc.d_w,
        crate::sentence_encoder::Arch::Recurrent => enc.hidden,
    };
    if cfg.lambda_s > 0.0 {
        let Some((labels, n_classes)) = labels else {
            return Err(crate::Error::Contract("lambda_s > 0 needs attribute labels".into()));
        };
        contract!(labels.len() == pairs.len(), "{} attribute labels for {} pairs", labels.len(), pairs.len());
        let mut adv = AttributeAdversary::new(n_classes, d, cfg.lambda_s, enc.lr, labels.to_vec())?;
        let (model, stats) = train_dual_encoder_with(pairs, vocab, enc, Some(&mut adv))?;
        return Ok(DefendedModel {
            model,
            head: Some(AdversaryHead::Attribute(adv.head)),
            stats,
        });
    }
    if cfg.lambda_w > 0.0 {
        let targets = pairs.iter().map(|p| word_set(&p.second)).collect();
        let mut adv = WordAdversary::new(vocab.len(), d, cfg.lambda_w, enc.lr, targets)?;
        let (model, stats) = train_dual_encoder_with(pairs, vocab, enc, Some(&mut adv))?;
        return Ok(DefendedModel {
            model,
            head: Some(AdversaryHead::WordMlc(adv.head)),
            stats,
        });
    }
    let (model, stats) = train_dual_encoder_with(pairs, vocab, enc, None)?;
    Ok(DefendedModel { model, head: None, stats })
}

/// Logistic regression on frozen embeddings; accuracy on `test`.
pub fn utility_probe(
    model: &SentenceEncoderModel,
    train: &[(Vec<usize>, usize)],
    test: &[(Vec<usize>, usize)],
    n_classes: usize,
    cfg: &AttributeConfig,
) -> Result<f64> {
    contract!(n_classes >= 2, "utility task needs at least two classes");
    contract!(!test.is_empty(), "utility task needs held-out items");
    let embed = |xs: &[(Vec<usize>, usize)]| -> Result<Vec<(Vec<f64>, usize)>> { xs.iter().map(|(x, s)| Ok((model.encode(x)?, *s))).collect() };
    let set = LabeledEmbeddingSet {
        items: embed(train)?,
        classes: (0..n_classes).map(|s| s.to_string()).collect(),
    };
    let f = train_attribute_classifier(&set, cfg)?;
    let mut hits = 0;
    for (e, s) in embed(test)? {
        if infer_attribute(&f, &e)?[0] == s {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Default probe settings for the utility task.
pub fn utility_probe_config(seed: u64) -> AttributeConfig {
    AttributeConfig {
        epochs: 50,
        lr: 0.01,
        batch_size: 128,
        seed,
        ..Default::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaKind {
    Word,
    Attribute,
}

/// One cell of a defense sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_kind: LambdaKind,
    pub lambda: f64,
    pub seed: u64,
    pub attack_metric: f64,
    pub utility_accuracy: f64,
}

pub const WORD_GRID: [f64; 5] = [0.0, 0.05, 0.1, 0.2, 0.4];
pub const ATTRIBUTE_GRID: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 1.0];

/// Least-squares non-increasing fit (pool adjacent violators).
pub fn isotonic_nonincreasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a >= b {
                break;
            }
            blocks.pop();
            let n = na + nb;
            *blocks.last_mut().unwrap() = ((a * na as f64 + b * nb as f64) / n as f64, n);
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect()
}

/// Number of adjacent increases.
pub fn count_increases(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

/// The metric sequence is non-increasing up to at most one adjacent inversion.
pub fn monotone_with_one_inversion(values: &[f64]) -> bool {
    count_increases(values) <= 1
}

/// Probability the word head assigns to each word; exposed for inspection.
pub fn word_head_probabilities(head: &MlcModel, phi: &[f64]) -> Result<Vec<f64>> {
    contract!(phi.len() == head.d(), "embedding dimension mismatch");
    let b = head.b.as_slice();
    Ok((0..head.vocab_size()).map(|w| if w == 0 { 0.0 } else { sigmoid(dot(head.w.row(w), phi) + b[w]) }).collect())
}
