use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::rng::{stream, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiaLevel {
    WordWindow,
    SentenceContext,
    Aggregate,
}

impl MiaLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            MiaLevel::WordWindow => "word_window",
            MiaLevel::SentenceContext => "sentence_context",
            MiaLevel::Aggregate => "aggregate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub advantage: f64,
}

/// Advantage of the rule `score >= tau` on an evaluation subset, with `tau`
/// chosen on a disjoint calibration subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageReport {
    pub level: MiaLevel,
    /// `None` for the report over all items.
    pub bucket: Option<usize>,
    pub tau: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub advantage: f64,
    pub n_member: usize,
    pub n_nonmember: usize,
}

/// One scored membership query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredItem {
    pub score: f64,
    pub member: bool,
    pub bucket: Option<usize>,
}

/// TPR and FPR of `score >= tau`.
pub fn rates_at(members: &[f64], nonmembers: &[f64], tau: f64) -> (f64, f64) {
    let frac = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().filter(|s| **s >= tau).count() as f64 / xs.len() as f64
        }
    };
    (frac(members), frac(nonmembers))
}

/// Rates at every distinct score, ascending in `tau`, plus `+inf` (nothing
/// flagged).
pub fn advantage_curve(members: &[f64], nonmembers: &[f64]) -> Result<Vec<CurvePoint>> {
    contract!(!members.is_empty() && !nonmembers.is_empty(), "advantage needs member and non-member scores");
    let mut m = members.to_vec();
    let mut n = nonmembers.to_vec();
    contract!(m.iter().chain(&n).all(|s| s.is_finite()), "membership scores must be finite");
    m.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut taus: Vec<f64> = m.iter().chain(&n).copied().collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    taus.push(f64::INFINITY);
    // number of scores >= tau via binary search on the sorted lists
    let at_least = |xs: &[f64], tau: f64| xs.len() - xs.partition_point(|s| *s < tau);
    Ok(taus
        .into_iter()
        .map(|tau| {
            let tpr = at_least(&m, tau) as f64 / m.len() as f64;
            let fpr = at_least(&n, tau) as f64 / n.len() as f64;
            CurvePoint {
                tau,
                tpr,
                fpr,
                advantage: tpr - fpr,
            }
        })
        .collect())
}

/// Threshold maximising advantage; ties go to the smallest threshold.
pub fn best_threshold(members: &[f64], nonmembers: &[f64]) -> Result<CurvePoint> {
    let curve = advantage_curve(members, nonmembers)?;
    let mut best = curve[0];
    for p in &curve[1..] {
        if p.advantage > best.advantage {
            best = *p;
        }
    }
    Ok(best)
}

/// Calibrates `tau` on the calibration scores and reports the evaluation
/// rates at that `tau`, with the full evaluation curve.
pub fn advantage_sweep(
    eval_members: &[f64],
    eval_nonmembers: &[f64],
    cal_members: &[f64],
    cal_nonmembers: &[f64],
    level: MiaLevel,
    bucket: Option<usize>,
) -> Result<(AdvantageReport, Vec<CurvePoint>)> {
    let tau = best_threshold(cal_members, cal_nonmembers)?.tau;
    let curve = advantage_curve(eval_members, eval_nonmembers)?;
    let (tpr, fpr) = rates_at(eval_members, eval_nonmembers, tau);
    Ok((
        AdvantageReport {
            level,
            bucket,
            tau,
            tpr,
            fpr,
            advantage: tpr - fpr,
            n_member: eval_members.len(),
            n_nonmember: eval_nonmembers.len(),
        },
        curve,
    ))
}

/// Randomly splits items into (evaluation, calibration), per class, keeping
/// at least one of each class on both sides when possible.
pub fn calibration_split(items: &[ScoredItem], cal_fraction: f64, seed: u64) -> (Vec<ScoredItem>, Vec<ScoredItem>) {
    let mut rng = stream(seed, streams::MEMBERSHIP);
    let mut eval = Vec::new();
    let mut cal = Vec::new();
    for member in [true, false] {
        let mut xs: Vec<ScoredItem> = items.iter().copied().filter(|i| i.member == member).collect();
        xs.shuffle(&mut rng);
        let mut k = (xs.len() as f64 * cal_fraction).round() as usize;
        if xs.len() >= 2 {
            k = k.clamp(1, xs.len() - 1);
        }
        cal.extend_from_slice(&xs[..k.min(xs.len())]);
        eval.extend_from_slice(&xs[k.min(xs.len())..]);
    }
    (eval, cal)
}

fn split_scores(items: &[ScoredItem]) -> (Vec<f64>, Vec<f64>) {
    let m = items.iter().filter(|i| i.member).map(|i| i.score).collect();
    let n = items.iter().filter(|i| !i.member).map(|i| i.score).collect();
    (m, n)
}

fn usable(items: &[ScoredItem]) -> bool {
    items.iter().any(|i| i.member) && items.iter().any(|i| !i.member)
}

/// Calibrated sweep over the given items.
pub fn calibrated_report(items: &[ScoredItem], cal_fraction: f64, seed: u64, level: MiaLevel, bucket: Option<usize>) -> Result<AdvantageReport> {
    let (eval, cal) = calibration_split(items, cal_fraction, seed);
    contract!(usable(&eval) && usable(&cal), "too few member/non-member items to calibrate and evaluate");
    let (em, en) = split_scores(&eval);
    let (cm, cn) = split_scores(&cal);
    Ok(advantage_sweep(&em, &en, &cm, &cn, level, bucket)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketEval {
    pub overall: AdvantageReport,
    /// One report per bucket that holds enough items; ascending bucket index.
    pub buckets: Vec<AdvantageReport>,
    /// Rank correlation between bucket index and advantage.
    pub spearman: Option<f64>,
}

/// Independent calibrated sweeps per frequency bucket, plus the pooled sweep.
/// Buckets without both classes on both sides of the split are omitted.
pub fn bucket_eval(items: &[ScoredItem], cal_fraction: f64, seed: u64, level: MiaLevel) -> Result<BucketEval> {
    let overall = calibrated_report(items, cal_fraction, seed, level, None)?;
    let mut by_bucket: BTreeMap<usize, Vec<ScoredItem>> = BTreeMap::new();
    for it in items {
        if let Some(b) = it.bucket {
            by_bucket.entry(b).or_default().push(*it);
        }
    }
    let mut buckets = Vec::new();
    for (b, xs) in &by_bucket {
        let (eval, cal) = calibration_split(xs, cal_fraction, seed);
        if usable(&eval) && usable(&cal) {
            buckets.push(calibrated_report(xs, cal_fraction, seed, level, Some(*b))?);
        }
    }
    let idx: Vec<f64> = buckets.iter().map(|r| r.bucket.unwrap() as f64).collect();
    let adv: Vec<f64> = buckets.iter().map(|r| r.advantage).collect();
    Ok(BucketEval {
        overall,
        spearman: spearman(&idx, &adv),
        buckets,
    })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` with fewer
/// than two points or a constant side.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}
