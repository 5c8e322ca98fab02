//! Similarity-threshold membership inference against word and sentence
//! embeddings.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextWindow, SentencePair, UNK};
use crate::error::{contract, domain, Result};
use crate::numerics::rng::{stream, streams};
use crate::numerics::{dot, ensure_finite, norm, sigmoid, AdamState, DenseMatrix};
use crate::sentence_encoder::SentenceEncoderModel;
use crate::word_embedding::{cosine_similarity, WordEmbeddingModel};

mod advantage;

pub use advantage::{
    advantage_curve, advantage_sweep, best_threshold, bucket_eval, calibrated_report, calibration_split, rates_at, spearman,
    AdvantageReport, BucketEval, CurvePoint, MiaLevel, ScoredItem,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMetric {
    Cosine,
    Dot,
}

/// `δ(a, b)`, or `δ(W^T a, W^T b)` when a projection is present.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMetric {
    pub base: BaseMetric,
    /// `d x d_proj`
    pub projection: Option<DenseMatrix>,
}

impl SimilarityMetric {
    pub fn cosine() -> Self {
        Self {
            base: BaseMetric::Cosine,
            projection: None,
        }
    }

    pub fn dot() -> Self {
        Self {
            base: BaseMetric::Dot,
            projection: None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match (&self.projection, self.base) {
            (Some(_), _) => "learned",
            (None, BaseMetric::Cosine) => "cosine",
            (None, BaseMetric::Dot) => "dot",
        }
    }

    fn project(&self, a: &[f64]) -> Result<Vec<f64>> {
        match &self.projection {
            None => Ok(a.to_vec()),
            Some(w) => {
                contract!(a.len() == w.rows(), "vector has dimension {}, projection expects {}", a.len(), w.rows());
                Ok(w.t_matvec(a))
            }
        }
    }

    pub fn score(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        contract!(a.len() == b.len(), "similarity of vectors of length {} and {}", a.len(), b.len());
        let (pa, pb) = (self.project(a)?, self.project(b)?);
        match self.base {
            BaseMetric::Cosine => cosine_similarity(&pa, &pb),
            BaseMetric::Dot => Ok(dot(&pa, &pb)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiaDecision {
    pub score: f64,
    pub member: bool,
}

fn decide(score: f64, tau: f64) -> MiaDecision {
    MiaDecision {
        score,
        member: score >= tau,
    }
}

/// Drops unknown-word context positions; `None` for an unknown centre or an
/// empty remainder.
pub fn known_window(window: &ContextWindow) -> Option<ContextWindow> {
    if window.center == UNK {
        return None;
    }
    let context: Vec<usize> = window.context.iter().copied().filter(|&w| w != UNK).collect();
    if context.is_empty() {
        return None;
    }
    Some(ContextWindow {
        center: window.center,
        context,
        source_split: window.source_split,
    })
}

/// Mean similarity between the centre word and each context word.
pub fn window_score(model: &WordEmbeddingModel, window: &ContextWindow, metric: &SimilarityMetric) -> Result<f64> {
    domain!(!window.context.is_empty(), "membership window has no context words");
    let n = model.v.rows();
    contract!(window.center < n && window.context.iter().all(|&w| w < n), "window id outside vocabulary");
    let c = model.vector(window.center);
    let mut total = 0.0;
    for &w in &window.context {
        total += metric.score(c, model.vector(w))?;
    }
    Ok(total / window.context.len() as f64)
}

pub fn mia_word_window(model: &WordEmbeddingModel, window: &ContextWindow, metric: &SimilarityMetric, tau: f64) -> Result<MiaDecision> {
    Ok(decide(window_score(model, window, metric)?, tau))
}

pub fn pair_score(model: &SentenceEncoderModel, pair: &SentencePair, metric: &SimilarityMetric) -> Result<f64> {
    metric.score(&model.encode(&pair.first)?, &model.encode(&pair.second)?)
}

pub fn mia_sentence_context(model: &SentenceEncoderModel, pair: &SentencePair, metric: &SimilarityMetric, tau: f64) -> Result<MiaDecision> {
    Ok(decide(pair_score(model, pair, metric)?, tau))
}

/// Mean similarity of consecutive embeddings.
pub fn aggregate_score_from_embeddings(embeddings: &[Vec<f64>], metric: &SimilarityMetric) -> Result<f64> {
    domain!(embeddings.len() >= 2, "aggregate membership needs at least two sentences, got {}", embeddings.len());
    let mut total = 0.0;
    for w in embeddings.windows(2) {
        total += metric.score(&w[0], &w[1])?;
    }
    Ok(total / (embeddings.len() - 1) as f64)
}

pub fn aggregate_score(model: &SentenceEncoderModel, sentences: &[Vec<usize>], metric: &SimilarityMetric) -> Result<f64> {
    domain!(sentences.len() >= 2, "aggregate membership needs at least two sentences, got {}", sentences.len());
    let embs = sentences.iter().map(|x| model.encode(x)).collect::<Result<Vec<_>>>()?;
    aggregate_score_from_embeddings(&embs, metric)
}

pub fn mia_aggregate(model: &SentenceEncoderModel, sentences: &[Vec<usize>], metric: &SimilarityMetric, tau: f64) -> Result<MiaDecision> {
    Ok(decide(aggregate_score(model, sentences, metric)?, tau))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnedSimilarityConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Projection width; `None` keeps the input dimension.
    pub d_proj: Option<usize>,
    pub init_noise: f64,
    /// Share of the auxiliary documents held out to pick the epoch.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for LearnedSimilarityConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.001,
            batch_size: 64,
            d_proj: None,
            init_noise: 0.01,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

/// A membership-labelled pair of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub member: bool,
}

/// Binary cross-entropy of `σ(δ(W^T a, W^T b) - offset)` against the label,
/// and its gradients in `W` and in the offset.
pub fn learned_similarity_loss_grad(w: &DenseMatrix, offset: f64, base: BaseMetric, pair: &LabeledPair) -> Result<(f64, DenseMatrix, f64)> {
    let p = w.t_matvec(&pair.a);
    let q = w.t_matvec(&pair.b);
    let (s, dp, dq) = match base {
        BaseMetric::Dot => (dot(&p, &q), q.clone(), p.clone()),
        BaseMetric::Cosine => {
            let (np, nq) = (norm(&p), norm(&q));
            domain!(np > 0.0 && nq > 0.0, "cosine of a zero projection");
            let c = dot(&p, &q) / (np * nq);
            let dp = (0..p.len()).map(|k| q[k] / (np * nq) - c * p[k] / (np * np)).collect::<Vec<_>>();
            let dq = (0..q.len()).map(|k| p[k] / (np * nq) - c * q[k] / (nq * nq)).collect::<Vec<_>>();
            (c, dp, dq)
        }
    };
    let y = if pair.member { 1.0 } else { 0.0 };
    let t = s - offset;
    // stable form of -[y log σ(t) + (1 - y) log(1 - σ(t))]
    let loss = t.max(0.0) - y * t + (-t.abs()).exp().ln_1p();
    let dt = sigmoid(t) - y;
    let mut g = w.zeros_like();
    g.add_outer(dt, &pair.a, &dp);
    g.add_outer(dt, &pair.b, &dq);
    Ok((loss, g, -dt))
}

/// Best-threshold advantage of `metric` on labelled pairs.
pub fn pair_advantage(metric: &SimilarityMetric, pairs: &[LabeledPair]) -> Result<f64> {
    let mut m = Vec::new();
    let mut n = Vec::new();
    for p in pairs {
        let s = metric.score(&p.a, &p.b)?;
        if p.member {
            m.push(s);
        } else {
            n.push(s);
        }
    }
    Ok(best_threshold(&m, &n)?.advantage)
}

/// Learns the projection with minibatch Adam from identity plus noise. The
/// logistic offset starts at the mean initial score and is learned alongside;
/// it only calibrates the loss and is not part of the returned metric.
///
/// With a non-empty `val` the projection after the epoch with the highest
/// `pair_advantage` on `val` is returned, the initial one included.
pub fn train_learned_similarity(aux: &[LabeledPair], val: &[LabeledPair], base: BaseMetric, cfg: &LearnedSimilarityConfig) -> Result<SimilarityMetric> {
    contract!(
        aux.iter().any(|p| p.member) && aux.iter().any(|p| !p.member),
        "learned similarity needs both member and non-member pairs"
    );
    let d = aux[0].a.len();
    contract!(aux.iter().all(|p| p.a.len() == d && p.b.len() == d), "pairs differ in dimension");
    let d_proj = cfg.d_proj.unwrap_or(d);
    let mut rng = stream(cfg.seed, streams::MEMBERSHIP);
    let mut w = DenseMatrix::zeros(d, d_proj);
    for r in 0..d {
        for c in 0..d_proj {
            let eye = if r == c { 1.0 } else { 0.0 };
            w.set(r, c, eye + cfg.init_noise * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let init = SimilarityMetric {
        base,
        projection: Some(w.clone()),
    };
    let mut offset = DenseMatrix::zeros(1, 1);
    let mut mean = 0.0;
    for p in aux {
        mean += init.score(&p.a, &p.b)? / aux.len() as f64;
    }
    offset.set(0, 0, mean);
    contract!(
        val.is_empty() || (val.iter().any(|p| p.member) && val.iter().any(|p| !p.member)),
        "validation pairs need both classes"
    );
    contract!(val.iter().all(|p| p.a.len() == d && p.b.len() == d), "validation pairs differ in dimension");
    let mut best = if val.is_empty() { None } else { Some((pair_advantage(&init, val)?, w.clone())) };
    let mut opt = AdamState::for_param(&w, cfg.lr);
    let mut opt_b = AdamState::for_param(&offset, cfg.lr);
    let mut order: Vec<usize> = (0..aux.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut g = w.zeros_like();
            let mut gb = 0.0;
            let mut total = 0.0;
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (l, gi, go) = learned_similarity_loss_grad(&w, offset.get(0, 0), base, &aux[i])?;
                total += l;
                g.add_scaled(inv, &gi)?;
                gb += inv * go;
            }
            ensure_finite(total, "learned similarity loss")?;
            opt.step(&mut w, &g)?;
            opt_b.step(&mut offset, &DenseMatrix::from_vec(1, 1, vec![gb])?)?;
        }
        if let Some((score, kept)) = &mut best {
            let now = pair_advantage(
                &SimilarityMetric {
                    base,
                    projection: Some(w.clone()),
                },
                val,
            )?;
            if now > *score {
                *score = now;
                *kept = w.clone();
            }
        }
    }
    Ok(SimilarityMetric {
        base,
        projection: Some(best.map_or(w, |b| b.1)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, Vocabulary};
    use crate::numerics::gradient_check;
    use crate::sentence_encoder::{Encoder, EncoderConfig};
    use crate::word_embedding::TrainerTag;

    fn word_model(rows: Vec<Vec<f64>>) -> WordEmbeddingModel {
        let n = rows.len();
        WordEmbeddingModel {
            vocab: Vocabulary::from_words_and_counts((0..n).map(|i| if i == 0 { "<unk>".into() } else { format!("w{i}") }).collect(), vec![1; n]).unwrap(),
            v: DenseMatrix::from_rows(&rows).unwrap(),
            trainer: TrainerTag::Sgns,
            config: serde_json::Value::Null,
        }
    }

    fn window(center: usize, context: Vec<usize>) -> ContextWindow {
        ContextWindow {
            center,
            context,
            source_split: Split::Train,
        }
    }

    #[test]
    fn window_score_examples() {
        let m = word_model(vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]]);
        let cos = SimilarityMetric::cosine();
        assert!((window_score(&m, &window(1, vec![2, 2]), &cos).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(window_score(&m, &window(1, vec![3]), &cos).unwrap(), 0.0);
        assert!(window_score(&m, &window(1, vec![]), &cos).is_err());
        let d = mia_word_window(&m, &window(1, vec![2, 3]), &cos, 0.5).unwrap();
        assert!(d.member && (d.score - 0.5).abs() < 1e-15);
        assert!(known_window(&window(UNK, vec![1])).is_none());
        assert!(known_window(&window(1, vec![UNK])).is_none());
        assert_eq!(known_window(&window(1, vec![UNK, 2])).unwrap().context, vec![2]);
    }

    fn sentence_model() -> SentenceEncoderModel {
        let cfg = EncoderConfig {
            d_w: 6,
            ..Default::default()
        };
        let words: Vec<String> = (0..10).map(|i| if i == 0 { "<unk>".into() } else { format!("w{i}") }).collect();
        SentenceEncoderModel::new(Encoder::init(10, &cfg), Vocabulary::from_words_and_counts(words, vec![1; 10]).unwrap(), cfg)
    }

    #[test]
    fn sentence_scores() {
        let m = sentence_model();
        let pair = |a: Vec<usize>, b: Vec<usize>| SentencePair {
            first: a,
            second: b,
            group_key: "g".into(),
            source_split: Split::Train,
        };
        let cos = SimilarityMetric::cosine();
        assert!((pair_score(&m, &pair(vec![1, 2], vec![1, 2]), &cos).unwrap() - 1.0).abs() < 1e-12);
        let dotm = SimilarityMetric::dot();
        let ab = pair_score(&m, &pair(vec![1, 3], vec![4, 5, 6]), &dotm).unwrap();
        let ba = pair_score(&m, &pair(vec![4, 5, 6], vec![1, 3]), &dotm).unwrap();
        assert_eq!(ab, ba);
        let agg = aggregate_score(&m, &[vec![1, 3], vec![4, 5, 6]], &dotm).unwrap();
        assert_eq!(agg, ab);
        assert!((aggregate_score(&m, &[vec![7, 8], vec![7, 8], vec![7, 8]], &cos).unwrap() - 1.0).abs() < 1e-12);
        assert!(aggregate_score(&m, &[vec![1]], &cos).is_err());
    }

    #[test]
    fn identity_projection_reproduces_base() {
        let a = vec![0.3, -1.2, 0.5];
        let b = vec![1.0, 0.4, -0.2];
        for base in [BaseMetric::Cosine, BaseMetric::Dot] {
            let fixed = SimilarityMetric { base, projection: None };
            let learned = SimilarityMetric {
                base,
                projection: Some(DenseMatrix::identity(3)),
            };
            assert_eq!(fixed.score(&a, &b).unwrap(), learned.score(&a, &b).unwrap());
        }
    }

    #[test]
    fn loss_plug_in_and_gradient() {
        // δ' = σ(raw) = 0.9999 on a member pair gives loss -ln(0.9999)
        let raw = (0.9999f64 / 0.0001).ln();
        let pair = LabeledPair {
            a: vec![raw.sqrt(), 0.0],
            b: vec![raw.sqrt(), 0.0],
            member: true,
        };
        let (l, _, _) = learned_similarity_loss_grad(&DenseMatrix::identity(2), 0.0, BaseMetric::Dot, &pair).unwrap();
        assert!((l - 1.00005e-4).abs() < 1e-8, "{l}");
        // shifting the offset by the raw score puts the pair at σ = 1/2
        let (l, _, _) = learned_similarity_loss_grad(&DenseMatrix::identity(2), raw, BaseMetric::Dot, &pair).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12, "{l}");
        let mut rng = stream(1, 1);
        let w0 = DenseMatrix::random_normal(4, 3, 0.7, &mut rng);
        for (base, member) in [(BaseMetric::Dot, true), (BaseMetric::Cosine, false)] {
            let p = LabeledPair {
                a: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                b: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                member,
            };
            let err = gradient_check(
                |w| {
                    let (l, g, _) = learned_similarity_loss_grad(w, 0.3, base, &p).unwrap();
                    (l, g)
                },
                &w0,
            );
            assert!(err < 1e-4, "{base:?}: {err}");
            let err = gradient_check(
                |b| {
                    let (l, _, g) = learned_similarity_loss_grad(&w0, b.get(0, 0), base, &p).unwrap();
                    (l, DenseMatrix::from_vec(1, 1, vec![g]).unwrap())
                },
                &DenseMatrix::from_vec(1, 1, vec![0.3]).unwrap(),
            );
            assert!(err < 1e-4, "offset {base:?}: {err}");
        }
    }

    #[test]
    fn flipped_labels_flip_the_learned_signal() {
        // members have aligned pairs along the first axis, non-members along the second
        let mut rng = stream(2, 2);
        let mut pairs = Vec::new();
        for i in 0..400 {
            let member = i % 2 == 0;
            let mut a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = if member { 0 } else { 1 };
            a[k] = 2.0;
            b[k] = 2.0;
            pairs.push(LabeledPair { a, b, member });
        }
        let cfg = LearnedSimilarityConfig {
            lr: 0.01,
            ..Default::default()
        };
        let adv = |metric: &SimilarityMetric| {
            let m: Vec<f64> = pairs.iter().filter(|p| p.member).map(|p| metric.score(&p.a, &p.b).unwrap()).collect();
            let n: Vec<f64> = pairs.iter().filter(|p| !p.member).map(|p| metric.score(&p.a, &p.b).unwrap()).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            mean(&m) - mean(&n)
        };
        let learned = train_learned_similarity(&pairs, &[], BaseMetric::Dot, &cfg).unwrap();
        let flipped: Vec<LabeledPair> = pairs.iter().map(|p| LabeledPair { member: !p.member, ..p.clone() }).collect();
        let anti = train_learned_similarity(&flipped, &[], BaseMetric::Dot, &cfg).unwrap();
        assert!(adv(&learned) > 0.0);
        assert!(adv(&anti) <= 0.0);
        let one_class: Vec<LabeledPair> = pairs.iter().filter(|p| p.member).cloned().collect();
        assert!(train_learned_similarity(&one_class, &[], BaseMetric::Dot, &cfg).is_err());
    }

    #[test]
    fn validation_never_picks_worse_than_the_start() {
        // labels carry no signal, so training can only fit noise
        let mut rng = stream(4, 4);
        let mut draw = |n: usize| -> Vec<LabeledPair> {
            (0..n)
                .map(|i| LabeledPair {
                    a: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    b: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    member: i % 2 == 0,
                })
                .collect()
        };
        let train = draw(200);
        let val = draw(200);
        let cfg = LearnedSimilarityConfig {
            lr: 0.05,
            epochs: 20,
            ..Default::default()
        };
        let con = train_learned_similarity(&train, &[], BaseMetric::Dot, &LearnedSimilarityConfig { epochs: 0, ..cfg.clone() }).unwrap();
        let picked = train_learned_similarity(&train, &val, BaseMetric::Dot, &cfg).unwrap();
        assert!(pair_advantage(&picked, &val).unwrap() >= pair_advantage(&con, &val).unwrap());
        let one_class: Vec<LabeledPair> = val.iter().filter(|p| p.member).cloned().collect();
        assert!(train_learned_similarity(&train, &one_class, BaseMetric::Dot, &cfg).is_err());
    }
}
