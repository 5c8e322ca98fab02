//! Recovering the words of a sentence from its embedding.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::UNK;
use crate::error::Result;
use crate::sentence_encoder::Encoder;

mod lower_map;
mod metrics;
mod mlc;
mod msp;
mod relaxed;
mod sparse;

pub use lower_map::{fit_lower_map, LowerMapFit};
pub use metrics::{f1_score, mean_metrics, word_set_metrics, SetMetrics};
pub use mlc::{mlc_loss, train_mlc, MlcConfig, MlcModel};
pub use msp::{msp_loss_grad, train_msp, MspConfig, MspModel};
pub use relaxed::{exhaustive_inversion, invert_relaxed, relaxed_loss_grad, RelaxedConfig, RelaxedObjective, RelaxedOutcome};
pub use sparse::{invert_sparse, invert_sparse_sentence, sparse_loss_grad, SparseConfig, SparseOutcome};

/// A recovered word set with a confidence per word.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WordSetPrediction {
    pub words: BTreeSet<usize>,
    pub scores: BTreeMap<usize, f64>,
}

impl WordSetPrediction {
    /// Adds `word`, keeping the larger score if it is already present.
    pub fn insert(&mut self, word: usize, score: f64) {
        self.words.insert(word);
        let s = self.scores.entry(word).or_insert(score);
        if score > *s {
            *s = score;
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// The distinct known words of a sentence.
pub fn word_set(ids: &[usize]) -> BTreeSet<usize> {
    ids.iter().copied().filter(|&w| w != UNK).collect()
}

/// One auxiliary (embedding, word set) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionSample {
    pub embedding: Vec<f64>,
    pub words: BTreeSet<usize>,
}

/// Queries the encoder on each sentence. Sentences without a known word
/// are skipped.
pub fn inversion_samples(encoder: &Encoder, sentences: &[Vec<usize>]) -> Result<Vec<InversionSample>> {
    let mut out = Vec::with_capacity(sentences.len());
    for x in sentences {
        let words = word_set(x);
        if words.is_empty() {
            continue;
        }
        out.push(InversionSample {
            embedding: encoder.encode(x)?,
            words,
        });
    }
    Ok(out)
}

/// A learned black-box inverter.
#[derive(Debug, Clone, PartialEq)]
pub enum InversionModel {
    Mlc(MlcModel),
    Msp(MspModel),
}

impl InversionModel {
    pub fn kind(&self) -> &'static str {
        match self {
            InversionModel::Mlc(_) => "mlc",
            InversionModel::Msp(_) => "msp",
        }
    }
}

/// Threshold rule for MLC (`len` is ignored); `len` greedy masked steps for MSP.
pub fn invert_blackbox(model: &InversionModel, target: &[f64], len: usize) -> Result<WordSetPrediction> {
    match model {
        InversionModel::Mlc(m) => m.predict(target),
        InversionModel::Msp(m) => m.predict(target, len),
    }
}
