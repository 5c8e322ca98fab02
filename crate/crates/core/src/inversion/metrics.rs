use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SetMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Set precision, recall and F1 of `predicted` against `truth`.
pub fn word_set_metrics(predicted: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> Result<SetMetrics> {
    domain!(!truth.is_empty(), "word set metrics need a non-empty truth set");
    let hit = predicted.intersection(truth).count() as f64;
    let precision = if predicted.is_empty() { 0.0 } else { hit / predicted.len() as f64 };
    let recall = hit / truth.len() as f64;
    Ok(SetMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

/// Macro average over targets.
pub fn mean_metrics(rows: &[SetMetrics]) -> SetMetrics {
    if rows.is_empty() {
        return SetMetrics::default();
    }
    let n = rows.len() as f64;
    SetMetrics {
        precision: rows.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: rows.iter().map(|m| m.recall).sum::<f64>() / n,
        f1: rows.iter().map(|m| m.f1).sum::<f64>() / n,
    }
}
