//! Word embedding trainers: skip-gram with sampled negatives over a single
//! matrix `V`, and a log-count co-occurrence regression.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextWindow, Vocabulary, UNK};
use crate::error::{contract, domain, Error, Result};
use crate::numerics::rng::{stream, streams};
use crate::numerics::{dot, log_sum_exp, norm, softmax_in_place, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerTag {
    Sgns,
    Cooc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgnsConfig {
    pub d: usize,
    pub negatives: usize,
    pub lr: f64,
    pub radius: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        Self {
            d: 100,
            negatives: 25,
            lr: 0.05,
            radius: 5,
            epochs: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoocConfig {
    pub d: usize,
    pub iters: usize,
    pub lr: f64,
    /// Ridge penalty applied to the vectors touched by each update.
    pub l2: f64,
    pub radius: usize,
    pub seed: u64,
}

impl Default for CoocConfig {
    fn default() -> Self {
        Self {
            d: 100,
            iters: 50,
            lr: 0.05,
            l2: 1e-4,
            radius: 5,
            seed: 0,
        }
    }
}

/// A trained word embedding matrix together with its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddingModel {
    pub vocab: Vocabulary,
    /// `|V| x d`, row `i` is the vector of word id `i`.
    pub v: DenseMatrix,
    pub trainer: TrainerTag,
    pub config: serde_json::Value,
}

impl WordEmbeddingModel {
    pub fn d(&self) -> usize {
        self.v.cols()
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        self.v.row(id)
    }
}

/// `u.v / (|u| |v|)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    contract!(u.len() == v.len(), "cosine over vectors of length {} and {}", u.len(), v.len());
    let (nu, nv) = (norm(u), norm(v));
    domain!(nu > 0.0 && nv > 0.0, "cosine similarity of a zero vector");
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `P(w_i | w_0)` over `{w_i}` together with the sampled negatives.
pub fn sgns_probability(v: &DenseMatrix, center: usize, context: usize, negatives: &[usize]) -> f64 {
    let v0 = v.row(center);
    let mut s: Vec<f64> = std::iter::once(context).chain(negatives.iter().copied()).map(|j| dot(v.row(j), v0)).collect();
    softmax_in_place(&mut s, 1.0);
    s[0]
}

/// Negative log of [`sgns_probability`] and its gradient with respect to the
/// whole matrix `V`. Candidates may repeat and may coincide with the center;
/// contributions accumulate.
pub fn sgns_loss_grad(v: &DenseMatrix, center: usize, context: usize, negatives: &[usize]) -> (f64, DenseMatrix) {
    let mut grad = v.zeros_like();
    let loss = sgns_accumulate(v, center, context, negatives, 1.0, |id, alpha, x| {
        crate::numerics::axpy(alpha, x, grad.row_mut(id));
    });
    (loss, grad)
}

/// Core of the SGNS step: calls `apply(id, alpha, x)` for each gradient term
/// `alpha * x` on row `id` and returns the loss. All terms are computed from
/// the current `v` before any is applied.
fn sgns_accumulate<F>(v: &DenseMatrix, center: usize, context: usize, negatives: &[usize], scale: f64, mut apply: F) -> f64
where
    F: FnMut(usize, f64, &[f64]),
{
    let v0 = v.row(center);
    let cand: Vec<usize> = std::iter::once(context).chain(negatives.iter().copied()).collect();
    let s: Vec<f64> = cand.iter().map(|&j| dot(v.row(j), v0)).collect();
    let loss = log_sum_exp(&s) - s[0];
    let mut p = s;
    softmax_in_place(&mut p, 1.0);
    p[0] -= 1.0;
    let mut g0 = vec![0.0; v.cols()];
    for (k, &j) in cand.iter().enumerate() {
        crate::numerics::axpy(p[k], v.row(j), &mut g0);
    }
    for (k, &j) in cand.iter().enumerate() {
        apply(j, scale * p[k], v0);
    }
    apply(center, scale, &g0);
    loss
}

/// Unigram^(3/4) sampler over non-UNK ids.
struct NegativeSampler {
    ids: Vec<usize>,
    alias: WeightedAliasIndex<f64>,
}

impl NegativeSampler {
    fn new(vocab: &Vocabulary) -> Result<Self> {
        let ids: Vec<usize> = (1..vocab.len()).filter(|&i| vocab.count(i) > 0).collect();
        contract!(!ids.is_empty(), "negative sampling needs at least one known word");
        let w: Vec<f64> = ids.iter().map(|&i| (vocab.count(i) as f64).powf(0.75)).collect();
        let alias = WeightedAliasIndex::new(w).map_err(|e| Error::Domain(format!("sampler: {e}")))?;
        Ok(Self { ids, alias })
    }

    /// Draws up to `k` ids not in `exclude`. Gives up on a draw after a few
    /// rejections so tiny vocabularies cannot stall.
    fn draw(&self, k: usize, exclude: &BTreeSet<usize>, rng: &mut impl Rng, out: &mut Vec<usize>) {
        out.clear();
        let mut attempts = 0;
        while out.len() < k && attempts < 10 * k + 10 {
            attempts += 1;
            let id = self.ids[self.alias.sample(rng)];
            if !exclude.contains(&id) {
                out.push(id);
            }
        }
    }
}

fn usable(w: &ContextWindow) -> bool {
    w.center != UNK && w.context.iter().any(|&c| c != UNK)
}

/// Skip-gram training with sampled negatives on a single matrix `V`.
///
/// SGD over `(w_0, w_i)` pairs; the learning rate decays linearly to 10% of
/// its initial value over the whole run. Windows with an UNK center or no
/// known context word are skipped.
pub fn train_sgns(windows: &[ContextWindow], vocab: &Vocabulary, cfg: &SgnsConfig) -> Result<WordEmbeddingModel> {
    contract!(cfg.d >= 1 && cfg.epochs >= 1, "sgns needs d >= 1 and epochs >= 1");
    let usable_windows: Vec<&ContextWindow> = windows.iter().filter(|w| usable(w)).collect();
    if usable_windows.is_empty() {
        return Err(Error::EmptyTrainingData);
    }
    for w in &usable_windows {
        contract!(
            w.center < vocab.len() && w.context.iter().all(|&c| c < vocab.len()),
            "window id out of vocabulary range"
        );
    }
    let sampler = NegativeSampler::new(vocab)?;
    let half = 0.5 / cfg.d as f64;
    let mut v = DenseMatrix::random_uniform(vocab.len(), cfg.d, -half, half, &mut stream(cfg.seed, streams::WORD_INIT));
    let mut rng = stream(cfg.seed, streams::WORD_TRAIN);

    let pairs_per_epoch: usize = usable_windows.iter().map(|w| w.context.iter().filter(|&&c| c != UNK).count()).sum();
    let total = (pairs_per_epoch * cfg.epochs) as f64;
    let mut done = 0usize;
    let mut order: Vec<usize> = (0..usable_windows.len()).collect();
    let mut negs = Vec::with_capacity(cfg.negatives);
    let mut updates: Vec<(usize, f64, Vec<f64>)> = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &wi in &order {
            let w = usable_windows[wi];
            let mut exclude: BTreeSet<usize> = w.context.iter().copied().collect();
            exclude.insert(w.center);
            exclude.insert(UNK);
            for &c in w.context.iter().filter(|&&c| c != UNK) {
                let lr = cfg.lr * (1.0 - 0.9 * done as f64 / total);
                done += 1;
                sampler.draw(cfg.negatives, &exclude, &mut rng, &mut negs);
                updates.clear();
                let loss = sgns_accumulate(&v, w.center, c, &negs, -lr, |id, alpha, x| updates.push((id, alpha, x.to_vec())));
                if !loss.is_finite() {
                    return Err(Error::NonFinite("sgns loss".into()));
                }
                for (id, alpha, x) in &updates {
                    crate::numerics::axpy(*alpha, x, v.row_mut(*id));
                }
            }
        }
    }
    if !v.is_finite() {
        return Err(Error::NonFinite("sgns embedding matrix".into()));
    }
    Ok(WordEmbeddingModel {
        vocab: vocab.clone(),
        v,
        trainer: TrainerTag::Sgns,
        config: serde_json::to_value(cfg).expect("config serializes"),
    })
}

/// Sparse symmetric co-occurrence counts keyed by `(i, j)`.
pub type CooccurrenceCounts = BTreeMap<(usize, usize), f64>;

/// Counts center/context pairs over known words.
pub fn cooccurrence_counts(windows: &[ContextWindow]) -> CooccurrenceCounts {
    let mut counts = CooccurrenceCounts::new();
    for w in windows.iter().filter(|w| w.center != UNK) {
        for &c in w.context.iter().filter(|&&c| c != UNK) {
            *counts.entry((w.center, c)).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// Parameters of the log-count regression.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocParams {
    pub w: DenseMatrix,
    pub w_ctx: DenseMatrix,
    pub b: Vec<f64>,
    pub b_ctx: Vec<f64>,
}

impl CoocParams {
    fn init(n: usize, d: usize, seed: u64) -> Self {
        let mut rng = stream(seed, streams::WORD_INIT);
        let half = 0.5 / d as f64;
        Self {
            w: DenseMatrix::random_uniform(n, d, -half, half, &mut rng),
            w_ctx: DenseMatrix::random_uniform(n, d, -half, half, &mut rng),
            b: vec![0.0; n],
            b_ctx: vec![0.0; n],
        }
    }

    /// `(w + w_ctx) / 2`.
    pub fn export(&self) -> DenseMatrix {
        let mut v = self.w.clone();
        v.add_scaled(1.0, &self.w_ctx).expect("same shape");
        v.scale(0.5);
        v
    }

    /// The same parameters with word and context roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            w: self.w_ctx.clone(),
            w_ctx: self.w.clone(),
            b: self.b_ctx.clone(),
            b_ctx: self.b.clone(),
        }
    }
}

/// `sum over nonzero (i,j) of (w_i . c_j + b_i + b~_j - log(1 + X_ij))^2`.
pub fn cooc_objective(p: &CoocParams, counts: &CooccurrenceCounts) -> f64 {
    counts
        .iter()
        .map(|(&(i, j), &x)| {
            let r = dot(p.w.row(i), p.w_ctx.row(j)) + p.b[i] + p.b_ctx[j] - x.ln_1p();
            r * r
        })
        .sum()
}

/// Fits the log-count regression by SGD over the nonzero entries, shuffling
/// entry order each iteration. Entries with zero count contribute nothing, so
/// an empty count table leaves the initialization untouched.
pub fn fit_cooccurrence(counts: &CooccurrenceCounts, n_words: usize, cfg: &CoocConfig) -> Result<CoocParams> {
    contract!(
        counts.keys().all(|&(i, j)| i < n_words && j < n_words),
        "co-occurrence index out of range"
    );
    let mut p = CoocParams::init(n_words, cfg.d, cfg.seed);
    let mut entries: Vec<((usize, usize), f64)> = counts.iter().filter(|(_, &x)| x > 0.0).map(|(&k, &x)| (k, x)).collect();
    let mut rng = stream(cfg.seed, streams::WORD_TRAIN);
    for _ in 0..cfg.iters {
        entries.shuffle(&mut rng);
        for &((i, j), x) in &entries {
            let r = dot(p.w.row(i), p.w_ctx.row(j)) + p.b[i] + p.b_ctx[j] - x.ln_1p();
            if !r.is_finite() {
                return Err(Error::NonFinite("co-occurrence residual".into()));
            }
            let g = 2.0 * r;
            let wi = p.w.row(i).to_vec();
            let cj = p.w_ctx.row(j).to_vec();
            for k in 0..cfg.d {
                p.w.row_mut(i)[k] -= cfg.lr * (g * cj[k] + 2.0 * cfg.l2 * wi[k]);
                p.w_ctx.row_mut(j)[k] -= cfg.lr * (g * wi[k] + 2.0 * cfg.l2 * cj[k]);
            }
            p.b[i] -= cfg.lr * g;
            p.b_ctx[j] -= cfg.lr * g;
        }
    }
    Ok(p)
}

/// Co-occurrence variant trainer; exports the averaged word/context vectors.
pub fn train_cooccurrence(windows: &[ContextWindow], vocab: &Vocabulary, cfg: &CoocConfig) -> Result<WordEmbeddingModel> {
    if windows.iter().all(|w| !usable(w)) {
        return Err(Error::EmptyTrainingData);
    }
    let counts = cooccurrence_counts(windows);
    let p = fit_cooccurrence(&counts, vocab.len(), cfg)?;
    let v = p.export();
    if !v.is_finite() {
        return Err(Error::NonFinite("co-occurrence embedding matrix".into()));
    }
    Ok(WordEmbeddingModel {
        vocab: vocab.clone(),
        v,
        trainer: TrainerTag::Cooc,
        config: serde_json::to_value(cfg).expect("config serializes"),
    })
}

/// Mean cosine between the center and each known context word of a window.
pub fn mean_window_cosine(model: &WordEmbeddingModel, w: &ContextWindow) -> Option<f64> {
    let sims: Vec<f64> = w
        .context
        .iter()
        .filter(|&&c| c != UNK)
        .filter_map(|&c| cosine_similarity(model.vector(w.center), model.vector(c)).ok())
        .collect();
    (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64)
}
