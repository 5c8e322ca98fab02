//! End-to-end experiment stages. Each takes the resolved config and returns
//! in-memory rows; the CLI persists them.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute::{
    infer_attribute, rank_scores, sample_attribute_task, top_k_accuracy, train_attribute_classifier, train_baseline_classifier,
    AttributeTask, LabeledEmbeddingSet,
};
use crate::corpus::{
    documents_from_records, frequency_percentile_buckets, read_documents, sliding_windows, split_corpus, vocabulary_of, ContextWindow,
    Document, Record, SentencePair, Split, Vocabulary,
};
use crate::defense::{train_defended_encoder, utility_probe, DefenseConfig, LambdaKind};
use crate::error::{contract, Error, Result};
use crate::inversion::{
    fit_lower_map, invert_relaxed, invert_sparse_sentence, inversion_samples, mean_metrics, train_mlc, train_msp, word_set,
    word_set_metrics, InversionSample, MlcModel, RelaxedObjective, SetMetrics,
};
use crate::membership::{
    aggregate_score_from_embeddings, bucket_eval, known_window, train_learned_similarity, window_score, AdvantageReport, BaseMetric,
    LabeledPair, MiaLevel, ScoredItem, SimilarityMetric,
};
use crate::numerics::rng::{child_seed, stream, streams};
use crate::sentence_encoder::{train_dual_encoder, Arch, SentenceEncoderModel};
use crate::word_embedding::{train_cooccurrence, train_sgns, TrainerTag, WordEmbeddingModel};

use super::config::{ExperimentConfig, InversionMode, RelaxedTarget, SweepKind};
use super::synth::{synth_corpus, SynthCorpus};

/// Documents after the train / held-out split, with the training vocabulary.
#[derive(Debug, Clone)]
pub struct CorpusData {
    pub vocab: Vocabulary,
    pub train: Vec<Document>,
    pub heldout: Vec<Document>,
    /// Held-out documents the adversary may query freely.
    pub aux: Vec<Document>,
    /// Held-out documents holding attack targets; disjoint from `aux`.
    pub targets: Vec<Document>,
    /// Topic-labelled documents for the utility probe; may be empty.
    pub utility: Vec<Document>,
    pub max_len: usize,
}

impl CorpusData {
    pub fn from_documents(docs: Vec<Document>, aux: Option<Vec<Document>>, utility: Vec<Document>, cfg: &ExperimentConfig) -> Result<Self> {
        if docs.len() < 2 {
            return Err(Error::EmptyCorpus);
        }
        let (train, heldout) = split_corpus(&docs, cfg.corpus.split_ratio, cfg.seed)?;
        let vocab = vocabulary_of(&train, cfg.corpus.min_count)?;
        let (aux, targets) = match aux {
            Some(a) => (a, heldout.clone()),
            None => split_corpus(&heldout, cfg.corpus.aux_fraction, child_seed(cfg.seed, 100))?,
        };
        Ok(Self {
            vocab,
            train,
            heldout,
            aux,
            targets,
            utility,
            max_len: cfg.corpus.max_len,
        })
    }

    pub fn from_synth(s: &SynthCorpus, cfg: &ExperimentConfig) -> Result<Self> {
        Self::from_documents(documents_from_records(&s.corpus), None, documents_from_records(&s.utility), cfg)
    }

    /// Reads the corpus files named in the config.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let docs = read_documents(&cfg.corpus.path)?;
        let aux = cfg.corpus.aux_path.as_deref().map(read_documents).transpose()?;
        let utility = cfg.corpus.utility_path.as_deref().map(read_documents).transpose()?.unwrap_or_default();
        Self::from_documents(docs, aux, utility, cfg)
    }

    pub fn encode(&self, docs: &[Document]) -> Vec<Vec<usize>> {
        docs.iter().flat_map(|d| d.encode(&self.vocab, self.max_len)).filter(|s| !s.is_empty()).collect()
    }

    pub fn pairs(&self, docs: &[Document], split: Split) -> Vec<SentencePair> {
        docs.iter().flat_map(|d| d.pairs(&self.vocab, self.max_len, split)).collect()
    }

    /// Per-sentence windows; they do not cross sentence boundaries.
    pub fn windows(&self, docs: &[Document], radius: usize, split: Split) -> Result<Vec<ContextWindow>> {
        let mut out = Vec::new();
        for s in self.encode(docs) {
            out.extend(sliding_windows(&s, radius)?.in_split(split));
        }
        Ok(out)
    }
}

/// Builds a synthetic corpus from the config's synth section.
pub fn synth_from_config(cfg: &ExperimentConfig) -> Result<SynthCorpus> {
    synth_corpus(&cfg.corpus.synth, child_seed(cfg.seed, 101))
}

pub fn synth_records(cfg: &ExperimentConfig) -> Result<(Vec<Record>, Vec<Record>)> {
    let s = synth_from_config(cfg)?;
    Ok((s.corpus, s.utility))
}

// ---------------------------------------------------------------- training

pub fn train_word_model(cfg: &ExperimentConfig, data: &CorpusData) -> Result<WordEmbeddingModel> {
    let cfg = cfg.resolved();
    match cfg.word.trainer {
        TrainerTag::Sgns => {
            let windows = data.windows(&data.train, cfg.word.sgns.radius, Split::Train)?;
            train_sgns(&windows, &data.vocab, &cfg.word.sgns)
        }
        TrainerTag::Cooc => {
            let windows = data.windows(&data.train, cfg.word.cooc.radius, Split::Train)?;
            train_cooccurrence(&windows, &data.vocab, &cfg.word.cooc)
        }
    }
}

pub fn train_sentence_model(cfg: &ExperimentConfig, data: &CorpusData) -> Result<SentenceEncoderModel> {
    let cfg = cfg.resolved();
    train_dual_encoder(&data.pairs(&data.train, Split::Train), &data.vocab, &cfg.sentence)
}

// ---------------------------------------------------------------- inversion

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionRow {
    pub target_id: usize,
    pub truth_words: Vec<String>,
    pub predicted_words: Vec<String>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mode: String,
    pub steps: usize,
    /// Objective value for white-box modes.
    pub final_loss: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionRun {
    pub rows: Vec<InversionRow>,
    pub mean: SetMetrics,
    /// Precision/recall over thresholds; MLC only.
    pub pr_curve: Vec<PrPoint>,
}

/// Held-out target sentences with a length inside the configured range,
/// in a seeded order, capped at `n_targets`.
pub fn inversion_targets(cfg: &ExperimentConfig, data: &CorpusData) -> Vec<Vec<usize>> {
    let a = &cfg.attack;
    let mut xs: Vec<Vec<usize>> = data
        .encode(&data.targets)
        .into_iter()
        .filter(|s| s.len() >= a.min_len && s.len() <= a.max_len && !word_set(s).is_empty())
        .collect();
    xs.shuffle(&mut stream(child_seed(cfg.seed, 102), streams::INVERSION));
    if a.n_targets > 0 {
        xs.truncate(a.n_targets);
    }
    xs
}

fn names(vocab: &Vocabulary, ids: impl IntoIterator<Item = usize>) -> Vec<String> {
    ids.into_iter().map(|i| vocab.word(i).to_string()).collect()
}

/// Aux sentences the adversary trains its inverter on.
pub fn inversion_aux_samples(model: &SentenceEncoderModel, data: &CorpusData) -> Result<Vec<InversionSample>> {
    inversion_samples(&model.encoder, &data.encode(&data.aux))
}

pub fn train_mlc_inverter(cfg: &ExperimentConfig, model: &SentenceEncoderModel, data: &CorpusData) -> Result<MlcModel> {
    let cfg = cfg.resolved();
    let aux = inversion_aux_samples(model, data)?;
    train_mlc(&aux, data.vocab.len(), &cfg.attack.mlc)
}

/// Mean set metrics of a trained MLC on the target sentences.
pub fn mlc_target_metrics(mlc: &MlcModel, model: &SentenceEncoderModel, targets: &[Vec<usize>]) -> Result<SetMetrics> {
    let mut ms = Vec::with_capacity(targets.len());
    for x in targets {
        let pred = mlc.predict(&model.encode(x)?)?;
        ms.push(word_set_metrics(&pred.words, &word_set(x))?);
    }
    Ok(mean_metrics(&ms))
}

fn pr_curve(mlc: &MlcModel, model: &SentenceEncoderModel, targets: &[Vec<usize>]) -> Result<Vec<PrPoint>> {
    let probs: Vec<Vec<f64>> = targets.iter().map(|x| mlc.probabilities(&model.encode(x)?)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for k in 1..20 {
        let t = k as f64 * 0.05;
        let mut ms = Vec::with_capacity(targets.len());
        for (x, p) in targets.iter().zip(&probs) {
            let pred = p.iter().enumerate().filter(|(w, &q)| *w != 0 && q > t).map(|(w, _)| w).collect();
            ms.push(word_set_metrics(&pred, &word_set(x))?);
        }
        let m = mean_metrics(&ms);
        out.push(PrPoint {
            threshold: t,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        });
    }
    Ok(out)
}

pub fn run_inversion(cfg: &ExperimentConfig, model: &SentenceEncoderModel, data: &CorpusData, mode: InversionMode) -> Result<InversionRun> {
    let hash = cfg.hash();
    let cfg = cfg.resolved();
    let a = &cfg.attack;
    let targets = inversion_targets(&cfg, data);
    contract!(!targets.is_empty(), "no held-out sentences with {} to {} tokens", a.min_len, a.max_len);
    let enc = &model.encoder;
    let needs_map = match mode {
        InversionMode::Sparse => enc.arch == Arch::Recurrent,
        InversionMode::Relaxed => a.relaxed_objective == RelaxedTarget::Lower,
        _ => false,
    };
    let lower = if needs_map { Some(fit_lower_map(enc, &data.encode(&data.aux), a.lower_l2)?.map) } else { None };
    let mut mlc = None;
    let mut msp = None;
    match mode {
        InversionMode::Mlc => mlc = Some(train_mlc_inverter(&cfg, model, data)?),
        InversionMode::Msp => msp = Some(train_msp(&inversion_aux_samples(model, data)?, data.vocab.len(), &a.msp)?),
        _ => {}
    }
    let mut rows = Vec::with_capacity(targets.len());
    let mut metrics = Vec::with_capacity(targets.len());
    for (i, x) in targets.iter().enumerate() {
        let truth = word_set(x);
        let phi = model.encode(x)?;
        let (pred, steps, loss) = match mode {
            InversionMode::Sparse => {
                let o = invert_sparse_sentence(enc, &phi, lower.as_ref(), &a.sparse)?;
                (o.prediction.words, o.steps, Some(o.loss))
            }
            InversionMode::Relaxed => {
                let objective = match &lower {
                    Some(m) => RelaxedObjective::Lower(m),
                    None => RelaxedObjective::Direct,
                };
                let mut rc = a.relaxed.clone();
                rc.seed = child_seed(rc.seed, i as u64);
                let o = invert_relaxed(enc, &phi, x.len(), objective, &rc)?;
                (o.prediction.words, o.steps, Some(o.hard_loss))
            }
            InversionMode::Mlc => (mlc.as_ref().unwrap().predict(&phi)?.words, 0, None),
            InversionMode::Msp => (msp.as_ref().unwrap().predict(&phi, truth.len())?.words, truth.len(), None),
        };
        let m = word_set_metrics(&pred, &truth)?;
        metrics.push(m);
        rows.push(InversionRow {
            target_id: i,
            truth_words: names(&data.vocab, truth.iter().copied()),
            predicted_words: names(&data.vocab, pred.iter().copied()),
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            mode: mode.as_str().to_string(),
            steps,
            final_loss: loss,
            config_hash: hash.clone(),
            seed: cfg.seed,
        });
    }
    let pr = match &mlc {
        Some(m) => pr_curve(m, model, &targets)?,
        None => Vec::new(),
    };
    Ok(InversionRun {
        rows,
        mean: mean_metrics(&metrics),
        pr_curve: pr,
    })
}

// ---------------------------------------------------------------- attribute

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRow {
    pub trial: usize,
    pub model: String,
    pub n_classes: usize,
    pub n_aux: usize,
    pub n_target: usize,
    pub top1: f64,
    pub top5: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// Held-out sentences grouped by document label, labels sorted.
pub fn attribute_groups(data: &CorpusData) -> Vec<(String, Vec<Vec<usize>>)> {
    let mut by: BTreeMap<String, Vec<Vec<usize>>> = BTreeMap::new();
    for d in &data.heldout {
        let e = d.encode(&data.vocab, data.max_len).into_iter().filter(|s| !word_set(s).is_empty());
        by.entry(d.label.clone()).or_default().extend(e);
    }
    by.into_iter().collect()
}

/// Attribute tasks, one per trial, each with the largest aux size; smaller
/// sizes take a prefix of every class.
pub fn attribute_tasks(cfg: &ExperimentConfig, data: &CorpusData) -> Result<Vec<AttributeTask<Vec<usize>>>> {
    let a = &cfg.attack.attribute;
    let n_max = a.n_aux.iter().copied().max().unwrap_or(0);
    contract!(n_max > 0, "attack.attribute.n_aux must name at least one positive size");
    let groups = attribute_groups(data);
    (0..a.trials.max(1))
        .map(|t| sample_attribute_task(&groups, a.classes, n_max, a.n_target, child_seed(cfg.seed, 200 + t as u64)))
        .collect()
}

fn aux_prefix(task: &AttributeTask<Vec<usize>>, n: usize) -> Vec<(Vec<usize>, usize)> {
    let mut seen = vec![0usize; task.classes.len()];
    let mut out = Vec::new();
    for (x, s) in &task.aux {
        if seen[*s] < n {
            seen[*s] += 1;
            out.push((x.clone(), *s));
        }
    }
    out
}

fn top_k_pair(preds: &[Vec<usize>], truths: &[usize]) -> Result<(f64, f64)> {
    let k5 = 5.min(preds.first().map_or(1, Vec::len));
    Ok((top_k_accuracy(preds, truths, 1)?, top_k_accuracy(preds, truths, k5)?))
}

/// Top-1 and top-5 of the embedding probe on one task at aux size `n`.
pub fn probe_task(cfg: &ExperimentConfig, model: &SentenceEncoderModel, task: &AttributeTask<Vec<usize>>, n: usize) -> Result<(f64, f64)> {
    let cfg = cfg.resolved();
    let set = LabeledEmbeddingSet {
        items: aux_prefix(task, n).into_iter().map(|(x, s)| Ok((model.encode(&x)?, s))).collect::<Result<_>>()?,
        classes: task.classes.clone(),
    };
    let f = train_attribute_classifier(&set, &cfg.attack.attribute.probe)?;
    let preds: Vec<Vec<usize>> = task.target.iter().map(|(x, _)| infer_attribute(&f, &model.encode(x)?)).collect::<Result<_>>()?;
    let truths: Vec<usize> = task.target.iter().map(|(_, s)| *s).collect();
    top_k_pair(&preds, &truths)
}

pub fn baseline_task(cfg: &ExperimentConfig, vocab_size: usize, task: &AttributeTask<Vec<usize>>, n: usize) -> Result<(f64, f64)> {
    let cfg = cfg.resolved();
    let cnn = train_baseline_classifier(&aux_prefix(task, n), vocab_size, task.classes.len(), &cfg.attack.attribute.baseline)?;
    let preds: Vec<Vec<usize>> = task.target.iter().map(|(x, _)| Ok(rank_scores(&cnn.logits(x)?))).collect::<Result<_>>()?;
    let truths: Vec<usize> = task.target.iter().map(|(_, s)| *s).collect();
    top_k_pair(&preds, &truths)
}

pub fn run_attribute(cfg: &ExperimentConfig, model: &SentenceEncoderModel, data: &CorpusData) -> Result<Vec<AttributeRow>> {
    let hash = cfg.hash();
    let a = &cfg.attack.attribute;
    let tasks = attribute_tasks(cfg, data)?;
    let mut rows = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        for &n in &a.n_aux {
            let probe = probe_task(cfg, model, task, n)?;
            let base = baseline_task(cfg, data.vocab.len(), task, n)?;
            for (name, (top1, top5)) in [("probe", probe), ("textcnn", base)] {
                rows.push(AttributeRow {
                    trial: t,
                    model: name.to_string(),
                    n_classes: task.classes.len(),
                    n_aux: n,
                    n_target: a.n_target,
                    top1,
                    top5,
                    config_hash: hash.clone(),
                    seed: cfg.seed,
                });
            }
        }
    }
    Ok(rows)
}

/// Mean of `top5` over trials for one model and aux size.
pub fn mean_top5(rows: &[AttributeRow], model: &str, n_aux: usize) -> Option<f64> {
    let xs: Vec<f64> = rows.iter().filter(|r| r.model == model && r.n_aux == n_aux).map(|r| r.top5).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

// ---------------------------------------------------------------- membership

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipRow {
    pub level: String,
    pub metric: String,
    /// Frequency decile; `None` for the pooled row.
    pub bucket: Option<usize>,
    pub tau: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub advantage: f64,
    pub n_member: usize,
    pub n_nonmember: usize,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipRun {
    pub rows: Vec<MembershipRow>,
    /// Rank correlation of bucket index against advantage, per (level, metric).
    pub spearman: Vec<(String, String, Option<f64>)>,
}

impl MembershipRun {
    pub fn find(&self, level: MiaLevel, metric: &str, bucket: Option<usize>) -> Option<&MembershipRow> {
        self.rows.iter().find(|r| r.level == level.as_str() && r.metric == metric && r.bucket == bucket)
    }
}

fn to_row(r: &AdvantageReport, metric: &str, hash: &str, seed: u64) -> MembershipRow {
    MembershipRow {
        level: r.level.as_str().to_string(),
        metric: metric.to_string(),
        bucket: r.bucket,
        tau: r.tau,
        tpr: r.tpr,
        fpr: r.fpr,
        advantage: r.advantage,
        n_member: r.n_member,
        n_nonmember: r.n_nonmember,
        config_hash: hash.to_string(),
        seed,
    }
}

fn push_eval(run: &mut MembershipRun, items: &[ScoredItem], level: MiaLevel, metric: &str, cfg: &ExperimentConfig, hash: &str) -> Result<()> {
    let m = &cfg.attack.membership;
    let ev = bucket_eval(items, m.cal_fraction, child_seed(cfg.seed, 300), level)?;
    run.rows.push(to_row(&ev.overall, metric, hash, cfg.seed));
    run.rows.extend(ev.buckets.iter().map(|r| to_row(r, metric, hash, cfg.seed)));
    run.spearman.push((level.as_str().to_string(), metric.to_string(), ev.spearman));
    Ok(())
}

/// Window-level attack on a word embedding: training windows are members,
/// held-out windows non-members, bucketed by the centre word's decile.
pub fn run_word_membership(cfg: &ExperimentConfig, model: &WordEmbeddingModel, data: &CorpusData) -> Result<MembershipRun> {
    let hash = cfg.hash();
    let radius = match model.trainer {
        TrainerTag::Sgns => cfg.word.sgns.radius,
        TrainerTag::Cooc => cfg.word.cooc.radius,
    };
    let buckets = frequency_percentile_buckets(&model.vocab)?;
    let metric = SimilarityMetric::cosine();
    let mut items = Vec::new();
    for (docs, split, member) in [(&data.train, Split::Train, true), (&data.heldout, Split::Heldout, false)] {
        for w in data.windows(docs, radius, split)? {
            if let Some(k) = known_window(&w) {
                items.push(ScoredItem {
                    score: window_score(model, &k, &metric)?,
                    member,
                    bucket: buckets.bucket(k.center),
                });
            }
        }
    }
    let mut run = MembershipRun {
        rows: Vec::new(),
        spearman: Vec::new(),
    };
    push_eval(&mut run, &items, MiaLevel::WordWindow, metric.kind(), cfg, &hash)?;
    Ok(run)
}

struct DocEmbeddings {
    member: bool,
    embs: Vec<Vec<f64>>,
    bucket: Option<usize>,
    pair_buckets: Vec<Option<usize>>,
}

fn embed_docs(model: &SentenceEncoderModel, data: &CorpusData, docs: &[Document], member: bool) -> Result<Vec<DocEmbeddings>> {
    let buckets = frequency_percentile_buckets(&model.vocab)?;
    let mut out = Vec::new();
    for d in docs {
        let sents: Vec<Vec<usize>> = d.encode(&data.vocab, data.max_len).into_iter().filter(|s| !s.is_empty()).collect();
        if sents.len() < 2 {
            continue;
        }
        let all: Vec<usize> = sents.concat();
        out.push(DocEmbeddings {
            member,
            embs: sents.iter().map(|s| model.encode(s)).collect::<Result<_>>()?,
            bucket: buckets.bucket_of_sentence(&model.vocab, &all),
            pair_buckets: sents.windows(2).map(|w| buckets.bucket_of_sentence(&model.vocab, &w[1])).collect(),
        });
    }
    Ok(out)
}

fn score_docs(docs: &[DocEmbeddings], metric: &SimilarityMetric) -> Result<(Vec<ScoredItem>, Vec<ScoredItem>)> {
    let mut context = Vec::new();
    let mut aggregate = Vec::new();
    for d in docs {
        for (w, b) in d.embs.windows(2).zip(&d.pair_buckets) {
            context.push(ScoredItem {
                score: metric.score(&w[0], &w[1])?,
                member: d.member,
                bucket: *b,
            });
        }
        aggregate.push(ScoredItem {
            score: aggregate_score_from_embeddings(&d.embs, metric)?,
            member: d.member,
            bucket: d.bucket,
        });
    }
    Ok((context, aggregate))
}

/// Context- and aggregate-level attacks on a sentence encoder, with the
/// fixed dot product and a similarity learned on a reserved share of
/// documents from each side.
pub fn run_sentence_membership(cfg: &ExperimentConfig, model: &SentenceEncoderModel, data: &CorpusData) -> Result<MembershipRun> {
    let hash = cfg.hash();
    let r = cfg.resolved();
    let m = &r.attack.membership;
    let (learn_in, eval_in) = split_corpus(&data.train, m.learned_fraction, child_seed(cfg.seed, 301))?;
    let (learn_out, eval_out) = split_corpus(&data.heldout, m.learned_fraction, child_seed(cfg.seed, 302))?;
    let mut eval = embed_docs(model, data, &eval_in, true)?;
    eval.extend(embed_docs(model, data, &eval_out, false)?);
    // the epoch is picked on whole held-back documents, never on pairs of a training document
    let held = m.learned.val_fraction;
    let (fit_in, val_in, fit_out, val_out) = if held > 0.0 {
        let (a, b) = split_corpus(&learn_in, 1.0 - held, child_seed(cfg.seed, 303))?;
        let (c, e) = split_corpus(&learn_out, 1.0 - held, child_seed(cfg.seed, 304))?;
        (a, b, c, e)
    } else {
        (learn_in, Vec::new(), learn_out, Vec::new())
    };
    let pairs = |docs: &[DocEmbeddings]| -> Vec<LabeledPair> {
        docs.iter()
            .flat_map(|d| {
                d.embs.windows(2).map(move |w| LabeledPair {
                    a: w[0].clone(),
                    b: w[1].clone(),
                    member: d.member,
                })
            })
            .collect()
    };
    let mut fit = embed_docs(model, data, &fit_in, true)?;
    fit.extend(embed_docs(model, data, &fit_out, false)?);
    let mut val = embed_docs(model, data, &val_in, true)?;
    val.extend(embed_docs(model, data, &val_out, false)?);
    let fixed = SimilarityMetric::dot();
    let learned = train_learned_similarity(&pairs(&fit), &pairs(&val), BaseMetric::Dot, &m.learned)?;
    let mut run = MembershipRun {
        rows: Vec::new(),
        spearman: Vec::new(),
    };
    for metric in [&fixed, &learned] {
        let (context, aggregate) = score_docs(&eval, metric)?;
        push_eval(&mut run, &context, MiaLevel::SentenceContext, metric.kind(), &r, &hash)?;
        push_eval(&mut run, &aggregate, MiaLevel::Aggregate, metric.kind(), &r, &hash)?;
    }
    Ok(run)
}

// ---------------------------------------------------------------- defense

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub lambda_kind: LambdaKind,
    pub lambda: f64,
    pub seed: u64,
    pub attack_metric: f64,
    pub utility_accuracy: f64,
    /// What `attack_metric` measures.
    pub metric: String,
    pub config_hash: String,
}

/// Sentence-level topic task from the utility documents, split by document
/// within each class.
pub fn utility_task(cfg: &ExperimentConfig, data: &CorpusData) -> Result<(Vec<(Vec<usize>, usize)>, Vec<(Vec<usize>, usize)>, usize)> {
    contract!(!data.utility.is_empty(), "the utility probe needs corpus.utility_path");
    let labels: BTreeMap<&str, usize> = {
        let set: std::collections::BTreeSet<&str> = data.utility.iter().map(|d| d.label.as_str()).collect();
        set.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
    };
    // split documents within each class so every class reaches the probe
    let mut tr = Vec::new();
    let mut te = Vec::new();
    for (&label, &k) in &labels {
        let docs: Vec<Document> = data.utility.iter().filter(|d| d.label == label).cloned().collect();
        let (a, b) = split_corpus(&docs, cfg.defense.utility_train_fraction, child_seed(cfg.seed, 400 + k as u64))?;
        tr.extend(a);
        te.extend(b);
    }
    let items = |docs: &[Document]| -> Vec<(Vec<usize>, usize)> {
        docs.iter()
            .flat_map(|d| d.encode(&data.vocab, data.max_len).into_iter().filter(|s| !s.is_empty()).map(|s| (s, labels[d.label.as_str()])))
            .collect()
    };
    Ok((items(&tr), items(&te), labels.len()))
}

/// Class index per training pair, from the document label.
pub fn pair_labels(data: &CorpusData) -> (Vec<SentencePair>, Vec<usize>, usize) {
    let classes: BTreeMap<&str, usize> = {
        let set: std::collections::BTreeSet<&str> = data.train.iter().map(|d| d.label.as_str()).collect();
        set.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
    };
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for d in &data.train {
        let ps = d.pairs(&data.vocab, data.max_len, Split::Train);
        labels.extend(std::iter::repeat_n(classes[d.label.as_str()], ps.len()));
        pairs.extend(ps);
    }
    (pairs, labels, classes.len())
}

/// Trains one defended encoder per (lambda, seed) cell, attacks it and
/// probes its utility. Cells run in parallel; row order is fixed.
pub fn run_defense_sweep(cfg: &ExperimentConfig, data: &CorpusData, kind: SweepKind) -> Result<Vec<DefenseRow>> {
    let hash = cfg.hash();
    let r = cfg.resolved();
    let grid = match kind {
        SweepKind::Word => &r.defense.lambda_w,
        SweepKind::Attribute => &r.defense.lambda_s,
    };
    let (pairs, labels, n_classes) = pair_labels(data);
    let (u_train, u_test, u_classes) = utility_task(&r, data)?;
    let targets = inversion_targets(&r, data);
    let tasks = match kind {
        SweepKind::Attribute => attribute_tasks(&r, data)?,
        SweepKind::Word => Vec::new(),
    };
    let cells: Vec<(f64, usize)> = grid.iter().flat_map(|&l| (0..r.defense.seeds).map(move |k| (l, k))).collect();
    let results: Vec<Result<Vec<DefenseRow>>> = cells
        .par_iter()
        .map(|&(lambda, k)| {
            let mut enc = r.sentence.clone();
            if k > 0 {
                enc.seed = child_seed(enc.seed, k as u64);
            }
            let dc = DefenseConfig {
                lambda_w: if kind == SweepKind::Word { lambda } else { 0.0 },
                lambda_s: if kind == SweepKind::Attribute { lambda } else { 0.0 },
                encoder: enc.clone(),
            };
            let defended = train_defended_encoder(&pairs, &data.vocab, &dc, Some((&labels, n_classes)))?;
            let model = defended.model;
            let utility = utility_probe(&model, &u_train, &u_test, u_classes, &r.defense.utility)?;
            let row = |metric: String, value: f64| DefenseRow {
                lambda_kind: match kind {
                    SweepKind::Word => LambdaKind::Word,
                    SweepKind::Attribute => LambdaKind::Attribute,
                },
                lambda,
                seed: enc.seed,
                attack_metric: value,
                utility_accuracy: utility,
                metric,
                config_hash: hash.clone(),
            };
            match kind {
                SweepKind::Word => {
                    let mlc = train_mlc_inverter(&r, &model, data)?;
                    Ok(vec![row("mlc_f1".into(), mlc_target_metrics(&mlc, &model, &targets)?.f1)])
                }
                SweepKind::Attribute => {
                    let mut rows = Vec::new();
                    for &n in &r.attack.attribute.n_aux {
                        let mut acc = 0.0;
                        for task in &tasks {
                            acc += probe_task(&r, &model, task, n)?.1;
                        }
                        rows.push(row(format!("probe_top5_n{n}"), acc / tasks.len() as f64));
                    }
                    Ok(rows)
                }
            }
        })
        .collect();
    let mut rows = Vec::new();
    for res in results {
        rows.extend(res?);
    }
    Ok(rows)
}

/// Attack metric series for one metric name, ordered by lambda, averaged
/// over seeds.
pub fn sweep_series(rows: &[DefenseRow], metric: &str) -> Vec<(f64, f64, f64)> {
    let mut by: BTreeMap<u64, (f64, f64, f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        let e = by.entry(r.lambda.to_bits()).or_insert((r.lambda, 0.0, 0.0, 0));
        e.1 += r.attack_metric;
        e.2 += r.utility_accuracy;
        e.3 += 1;
    }
    let mut v: Vec<(f64, f64, f64)> = by.into_values().map(|(l, a, u, n)| (l, a / n as f64, u / n as f64)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::SynthConfig;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.corpus.synth = SynthConfig {
            authors: 6,
            books_per_author: 4,
            sentences_per_book: 8,
            filler_words: 200,
            utility_books: 12,
            ..Default::default()
        };
        c.word.sgns.d = 8;
        c.word.sgns.epochs = 1;
        c.sentence.d_w = 8;
        c.sentence.epochs = 1;
        c.attack.n_targets = 5;
        c.attack.mlc.epochs = 2;
        c.attack.msp.epochs = 1;
        c.attack.msp.hidden = 8;
        c.attack.msp.d_word = 4;
        c.attack.relaxed.max_steps = 20;
        c.attack.relaxed.restarts = 1;
        c.attack.attribute.classes = 3;
        c.attack.attribute.n_aux = vec![2, 4];
        c.attack.attribute.n_target = 3;
        c.attack.attribute.trials = 1;
        c.attack.attribute.baseline.filters = 4;
        c.attack.attribute.baseline.epochs = 2;
        c.attack.membership.learned.epochs = 1;
        c.defense.lambda_w = vec![0.0, 0.4];
        c.defense.lambda_s = vec![0.0, 1.0];
        c.defense.utility.epochs = 2;
        c
    }

    #[test]
    fn every_stage_runs_on_a_tiny_corpus() {
        let c = tiny();
        let data = CorpusData::from_synth(&synth_from_config(&c).unwrap(), &c).unwrap();
        assert!(data.aux.iter().all(|a| data.targets.iter().all(|t| t.group != a.group)));
        let sm = train_sentence_model(&c, &data).unwrap();
        for mode in [InversionMode::Sparse, InversionMode::Relaxed, InversionMode::Mlc, InversionMode::Msp] {
            let run = run_inversion(&c, &sm, &data, mode).unwrap();
            assert_eq!(run.rows.len(), 5);
            assert_eq!(run.pr_curve.is_empty(), mode != InversionMode::Mlc);
        }
        let rows = run_attribute(&c, &sm, &data).unwrap();
        assert_eq!(rows.len(), 4);
        let wm = train_word_model(&c, &data).unwrap();
        let wr = run_word_membership(&c, &wm, &data).unwrap();
        assert!(wr.find(MiaLevel::WordWindow, "cosine", None).is_some());
        let sr = run_sentence_membership(&c, &sm, &data).unwrap();
        for level in [MiaLevel::SentenceContext, MiaLevel::Aggregate] {
            assert!(sr.find(level, "dot", None).is_some());
            assert!(sr.find(level, "learned", None).is_some());
        }
        assert_eq!(run_defense_sweep(&c, &data, SweepKind::Word).unwrap().len(), 2);
        assert_eq!(run_defense_sweep(&c, &data, SweepKind::Attribute).unwrap().len(), 4);
    }

    #[test]
    fn zero_lambda_cell_matches_the_plain_encoder() {
        let mut c = tiny();
        c.defense.lambda_w = vec![0.0];
        let data = CorpusData::from_synth(&synth_from_config(&c).unwrap(), &c).unwrap();
        let plain = train_sentence_model(&c, &data).unwrap();
        let targets = inversion_targets(&c.resolved(), &data);
        let mlc = train_mlc_inverter(&c, &plain, &data).unwrap();
        let f1 = mlc_target_metrics(&mlc, &plain, &targets).unwrap().f1;
        let rows = run_defense_sweep(&c, &data, SweepKind::Word).unwrap();
        assert_eq!(rows[0].attack_metric, f1);
    }
}
