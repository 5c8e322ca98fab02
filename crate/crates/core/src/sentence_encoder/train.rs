use rand::seq::SliceRandom;

use super::{Encoder, EncoderConfig, EncoderParams, ForwardCache, SentenceEncoderModel};
use crate::corpus::{SentencePair, Vocabulary};
use crate::error::{contract, Error, Result};
use crate::numerics::rng::{stream, streams};
use crate::numerics::{log_sum_exp, softmax_in_place, AdamGroup, DenseMatrix};

/// Gradient of the encoder parameters, laid out like the parameters.
pub type EncoderGrad = EncoderParams;

/// In-batch contrastive loss on precomputed embeddings.
///
/// Row `i` of `positives` is the positive for anchor `i`; the other rows are
/// its negatives. Returns `(loss, dL/d anchors, dL/d positives)` with
/// `loss = -(1/B) sum_i log softmax(A B^T)_ii`.
pub fn contrastive_loss(anchors: &DenseMatrix, positives: &DenseMatrix) -> Result<(f64, DenseMatrix, DenseMatrix)> {
    contract!(anchors.shape() == positives.shape(), "anchor and positive batches differ in shape");
    let b = anchors.rows();
    contract!(b >= 2, "contrastive batch needs at least 2 pairs");
    let s = anchors.matmul(&positives.transpose())?;
    let mut loss = 0.0;
    let mut ds = s.clone();
    for i in 0..b {
        loss += log_sum_exp(s.row(i)) - s.get(i, i);
        let row = ds.row_mut(i);
        softmax_in_place(row, 1.0);
        row[i] -= 1.0;
        row.iter_mut().for_each(|v| *v /= b as f64);
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    let da = ds.matmul(positives)?;
    let db = ds.transpose().matmul(anchors)?;
    Ok((loss, da, db))
}

/// A head trained jointly with the encoder through a reversal layer.
///
/// The trainer hands it the positive-side embeddings Φ(x_b) of each batch with the
/// indices of the batch pairs; the head returns its loss and the gradient of
/// that loss with respect to the embeddings, keeping its own parameter
/// gradient for the following [`BatchAdversary::step`].
pub trait BatchAdversary {
    fn lambda(&self) -> f64;
    fn forward_backward(&mut self, embeddings: &DenseMatrix, items: &[usize]) -> Result<(f64, DenseMatrix)>;
    fn step(&mut self) -> Result<()>;
}

fn encode_batch(encoder: &Encoder, seqs: &[&[usize]]) -> (DenseMatrix, Vec<ForwardCache>) {
    let mut out = DenseMatrix::zeros(seqs.len(), encoder.d());
    let mut caches = Vec::with_capacity(seqs.len());
    for (i, ids) in seqs.iter().enumerate() {
        let (phi, c) = encoder.forward_vectors(&encoder.params.word.gather_rows(ids));
        out.row_mut(i).copy_from_slice(&phi);
        caches.push(c);
    }
    (out, caches)
}

fn backprop_batch(encoder: &Encoder, seqs: &[&[usize]], caches: &[ForwardCache], d: &DenseMatrix, grad: &mut EncoderGrad) {
    for (i, ids) in seqs.iter().enumerate() {
        let dxs = encoder.backward(&caches[i], d.row(i), grad.gru.as_mut());
        for (t, &w) in ids.iter().enumerate() {
            crate::numerics::axpy(1.0, dxs.row(t), grad.word.row_mut(w));
        }
    }
}

/// Loss and parameter gradient of one batch.
///
/// With an adversary, the encoder gradient is `dL_con - lambda * dL_adv`
/// (the reversal layer sits between Φ(x_b) and the head) and the returned
/// loss is `L_con - lambda * L_adv`. The third value is `L_adv` alone.
pub fn contrastive_loss_grad(
    encoder: &Encoder,
    batch: &[(&[usize], &[usize])],
    items: &[usize],
    adversary: Option<&mut dyn BatchAdversary>,
) -> Result<(f64, EncoderGrad, f64)> {
    let firsts: Vec<&[usize]> = batch.iter().map(|p| p.0).collect();
    let seconds: Vec<&[usize]> = batch.iter().map(|p| p.1).collect();
    let (a, ca) = encode_batch(encoder, &firsts);
    let (b, cb) = encode_batch(encoder, &seconds);
    let (loss, da, mut db) = contrastive_loss(&a, &b)?;
    let mut total = loss;
    let mut adv_loss = 0.0;
    if let Some(adv) = adversary {
        let lambda = adv.lambda();
        let (la, dadv) = adv.forward_backward(&b, items)?;
        adv_loss = la;
        if lambda != 0.0 {
            // gradient reversal: identity forward, -lambda backward
            db.add_scaled(-lambda, &dadv)?;
            total -= lambda * la;
        }
    }
    let mut grad = encoder.params.zeros_like();
    backprop_batch(encoder, &firsts, &ca, &da, &mut grad);
    backprop_batch(encoder, &seconds, &cb, &db, &mut grad);
    Ok((total, grad, adv_loss))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    pub batch_losses: Vec<f64>,
    pub adversary_losses: Vec<f64>,
}

impl TrainStats {
    pub fn mean_last_epoch(&self, batches_per_epoch: usize) -> f64 {
        let n = batches_per_epoch.min(self.batch_losses.len()).max(1);
        self.batch_losses[self.batch_losses.len() - n..].iter().sum::<f64>() / n as f64
    }
}

/// Contrastive training with in-batch negatives and Adam.
pub fn train_dual_encoder(pairs: &[SentencePair], vocab: &Vocabulary, cfg: &EncoderConfig) -> Result<SentenceEncoderModel> {
    Ok(train_dual_encoder_with(pairs, vocab, cfg, None)?.0)
}

/// [`train_dual_encoder`] with an optional jointly trained adversary head.
///
/// The head consumes its own random stream, so a run whose head has
/// `lambda == 0` follows exactly the same encoder trajectory as a run without
/// a head.
pub fn train_dual_encoder_with(
    pairs: &[SentencePair],
    vocab: &Vocabulary,
    cfg: &EncoderConfig,
    mut adversary: Option<&mut dyn BatchAdversary>,
) -> Result<(SentenceEncoderModel, TrainStats)> {
    contract!(cfg.batch_size >= 2, "batch_size must be at least 2 for in-batch negatives");
    contract!(cfg.d_w >= 1 && cfg.epochs >= 1, "encoder needs d_w >= 1 and epochs >= 1");
    if pairs.len() < 2 {
        return Err(Error::EmptyTrainingData);
    }
    for p in pairs {
        contract!(!p.first.is_empty() && !p.second.is_empty(), "sentence pair with an empty side");
        contract!(
            p.first.len() <= cfg.max_len && p.second.len() <= cfg.max_len,
            "sentence longer than max_len {}",
            cfg.max_len
        );
        contract!(
            p.first.iter().chain(&p.second).all(|&i| i < vocab.len()),
            "token id out of vocabulary range"
        );
    }
    let mut encoder = Encoder::init(vocab.len(), cfg);
    let mut opt = AdamGroup::new(&encoder.params, cfg.lr);
    let mut rng = stream(cfg.seed, streams::ENCODER_SHUFFLE);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut stats = TrainStats::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<(&[usize], &[usize])> =
                chunk.iter().map(|&i| (pairs[i].first.as_slice(), pairs[i].second.as_slice())).collect();
            let adv: Option<&mut dyn BatchAdversary> = match adversary.as_mut() {
                Some(a) => Some(&mut **a),
                None => None,
            };
            let (loss, grad, adv_loss) = contrastive_loss_grad(&encoder, &batch, chunk, adv)?;
            opt.step(&mut encoder.params, &grad)?;
            if let Some(a) = adversary.as_mut() {
                a.step()?;
                stats.adversary_losses.push(adv_loss);
            }
            stats.batch_losses.push(loss);
        }
    }
    if !crate::numerics::ParamBlocks::all_finite(&encoder.params) {
        return Err(Error::NonFinite("encoder parameters".into()));
    }
    Ok((SentenceEncoderModel::new(encoder, vocab.clone(), cfg.clone()), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{sentence_pairs, Split};
    use crate::numerics::ParamBlocks;
    use crate::sentence_encoder::{Arch, Reducer};
    use rand::Rng;

    #[test]
    fn equal_embeddings_give_log_b() {
        let a = DenseMatrix::from_rows(&vec![vec![0.3, -0.1]; 5]).unwrap();
        let (loss, _, _) = contrastive_loss(&a, &a).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_pair_probability() {
        // positive score 1, negative score 0 for both anchors
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (loss, _, _) = contrastive_loss(&a, &a).unwrap();
        let p = (-loss).exp();
        let e = std::f64::consts::E;
        assert!((p - e / (e + 1.0)).abs() < 1e-12);
        assert!((p - 0.7311).abs() < 1e-4);
    }

    fn small_batch(rng: &mut impl Rng, vocab: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
        (0..4)
            .map(|_| {
                let la = rng.random_range(1..=5);
                let lb = rng.random_range(1..=5);
                (
                    (0..la).map(|_| rng.random_range(0..vocab)).collect(),
                    (0..lb).map(|_| rng.random_range(0..vocab)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn contrastive_gradient_passes_check() {
        let mut rng = stream(8, 0);
        for (arch, red) in [(Arch::MeanPool, Reducer::Mean), (Arch::Recurrent, Reducer::Mean), (Arch::Recurrent, Reducer::Last)] {
            let cfg = EncoderConfig {
                arch,
                reducer: red,
                d_w: 8,
                hidden: 8,
                max_len: 5,
                seed: 2,
                ..Default::default()
            };
            let enc = Encoder::init(10, &cfg);
            let owned = small_batch(&mut rng, 10);
            let batch: Vec<(&[usize], &[usize])> = owned.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
            let flat = enc.params.flatten();
            let point = DenseMatrix::from_vec(1, flat.len(), flat).unwrap();
            let mut work = enc.clone();
            let report = crate::numerics::gradient_check_report(
                &mut |p: &DenseMatrix| {
                    work.params.assign_flat(p.as_slice());
                    let (l, g, _) = contrastive_loss_grad(&work, &batch, &[0, 1, 2, 3], None).unwrap();
                    (l, DenseMatrix::from_vec(1, p.len(), g.flatten()).unwrap())
                },
                &point,
                3,
            );
            assert!(report.max_rel_error < 1e-4, "{arch:?}/{red:?}: {report:?}");
        }
    }

    #[test]
    fn frozen_batch_loss_decreases_under_adam() {
        let mut rng = stream(12, 0);
        let cfg = EncoderConfig {
            d_w: 8,
            max_len: 5,
            lr: 0.01,
            ..Default::default()
        };
        let mut enc = Encoder::init(20, &cfg);
        let owned = small_batch(&mut rng, 20);
        let batch: Vec<(&[usize], &[usize])> = owned.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
        let mut opt = AdamGroup::new(&enc.params, cfg.lr);
        let mut prev = contrastive_loss_grad(&enc, &batch, &[], None).unwrap().0;
        for _ in 0..5 {
            let (_, g, _) = contrastive_loss_grad(&enc, &batch, &[], None).unwrap();
            opt.step(&mut enc.params, &g).unwrap();
            let now = contrastive_loss_grad(&enc, &batch, &[], None).unwrap().0;
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn overfit_retrieval_ranks_positive_first() {
        let mut rng = stream(31, 0);
        let vocab_words: Vec<String> = (0..80).map(|i| format!("v{i}")).collect();
        let vocab = Vocabulary::from_texts([vocab_words.join(" ").as_str()], 1).unwrap();
        let mut pairs = Vec::new();
        // two-sentence documents, so no sentence is both an anchor and a candidate
        for d in 0..64 {
            let doc: Vec<Vec<usize>> = (0..2)
                .map(|_| (0..6).map(|_| rng.random_range(1..vocab.len())).collect())
                .collect();
            pairs.extend(sentence_pairs(&doc, &format!("d{d}")));
        }
        let cfg = EncoderConfig {
            d_w: 32,
            batch_size: 16,
            epochs: 100,
            lr: 0.01,
            seed: 1,
            ..Default::default()
        };
        let model = train_dual_encoder(&pairs, &vocab, &cfg).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut stream(5, 0));
        let mut hits = 0;
        for chunk in shuffled.chunks(16) {
            let a: Vec<Vec<f64>> = chunk.iter().map(|p| model.encode(&p.first).unwrap()).collect();
            let b: Vec<Vec<f64>> = chunk.iter().map(|p| model.encode(&p.second).unwrap()).collect();
            for i in 0..chunk.len() {
                let s: Vec<f64> = b.iter().map(|bj| crate::numerics::dot(&a[i], bj)).collect();
                let best = (0..s.len()).max_by(|&x, &y| s[x].partial_cmp(&s[y]).unwrap()).unwrap();
                hits += (best == i) as usize;
            }
        }
        let frac = hits as f64 / pairs.len() as f64;
        assert!(frac >= 0.8, "retrieval {frac}");
        assert!(pairs.iter().all(|p| p.source_split == Split::Train));
    }

    #[test]
    fn rejects_bad_inputs() {
        let vocab = Vocabulary::from_texts(["a b c"], 1).unwrap();
        let cfg = EncoderConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(train_dual_encoder(&[], &vocab, &cfg), Err(Error::Contract(_))));
        assert!(matches!(train_dual_encoder(&[], &vocab, &EncoderConfig::default()), Err(Error::EmptyTrainingData)));
    }
}
