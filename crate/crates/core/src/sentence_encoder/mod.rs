//! Dual-encoder sentence embeddings: a mean-pooling bag of vectors and a
//! unidirectional GRU, both trained with in-batch contrastive loss.

mod gru;
mod train;

pub use gru::{GruParams, GruStep};
pub use train::{
    contrastive_loss, contrastive_loss_grad, train_dual_encoder, train_dual_encoder_with, BatchAdversary, EncoderGrad,
    TrainStats,
};

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, DEFAULT_MAX_LEN};
use crate::error::{contract, domain, Result};
use crate::numerics::rng::{stream, streams};
use crate::numerics::{DenseMatrix, ParamBlocks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    MeanPool,
    Recurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    Mean,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub reducer: Reducer,
    /// Word vector dimension.
    pub d_w: usize,
    /// Hidden size of the recurrent cell; ignored by mean pooling.
    pub hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: Arch::MeanPool,
            reducer: Reducer::Mean,
            d_w: 100,
            hidden: 128,
            batch_size: 64,
            epochs: 5,
            lr: 0.001,
            seed: 0,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// All trainable blocks of an encoder. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `|V| x d_w`
    pub word: DenseMatrix,
    pub gru: Option<GruParams>,
}

impl ParamBlocks for EncoderParams {
    fn blocks(&self) -> Vec<&DenseMatrix> {
        let mut b = vec![&self.word];
        if let Some(g) = &self.gru {
            b.extend([&g.w, &g.u, &g.b]);
        }
        b
    }

    fn blocks_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut b = vec![&mut self.word];
        if let Some(g) = &mut self.gru {
            b.extend([&mut g.w, &mut g.u, &mut g.b]);
        }
        b
    }
}

impl EncoderParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            word: self.word.zeros_like(),
            gru: self.gru.as_ref().map(GruParams::zeros_like),
        }
    }
}

/// Activations of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub xs: DenseMatrix,
    pub steps: Vec<GruStep>,
    pub hs: Vec<Vec<f64>>,
}

/// Architecture plus parameters; everything needed to compute Φ.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub arch: Arch,
    pub reducer: Reducer,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn init(vocab_size: usize, cfg: &EncoderConfig) -> Self {
        let mut rng = stream(cfg.seed, streams::ENCODER_INIT);
        let word = DenseMatrix::random_normal(vocab_size, cfg.d_w, 1.0 / (cfg.d_w as f64).sqrt(), &mut rng);
        let gru = match cfg.arch {
            Arch::MeanPool => None,
            Arch::Recurrent => Some(GruParams::init(cfg.d_w, cfg.hidden, &mut rng)),
        };
        Self {
            arch: cfg.arch,
            reducer: cfg.reducer,
            params: EncoderParams { word, gru },
        }
    }

    pub fn d_w(&self) -> usize {
        self.params.word.cols()
    }

    /// Output dimension of Φ.
    pub fn d(&self) -> usize {
        match &self.params.gru {
            Some(g) => g.hidden(),
            None => self.d_w(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.params.word.rows()
    }

    /// Φ over arbitrary word vectors (one per row).
    pub fn encode_from_vectors(&self, xs: &DenseMatrix) -> Result<Vec<f64>> {
        contract!(
            xs.cols() == self.d_w(),
            "word vectors have dimension {}, encoder expects {}",
            xs.cols(),
            self.d_w()
        );
        domain!(xs.rows() >= 1, "cannot encode an empty sequence");
        Ok(self.forward_vectors(xs).0)
    }

    /// Forward pass with the cache needed for [`Encoder::backward`].
    pub fn forward_vectors(&self, xs: &DenseMatrix) -> (Vec<f64>, ForwardCache) {
        let l = xs.rows();
        match &self.params.gru {
            None => {
                let mut out = vec![0.0; self.d_w()];
                for i in 0..l {
                    crate::numerics::axpy(1.0, xs.row(i), &mut out);
                }
                out.iter_mut().for_each(|v| *v /= l as f64);
                (
                    out,
                    ForwardCache {
                        xs: xs.clone(),
                        steps: Vec::new(),
                        hs: Vec::new(),
                    },
                )
            }
            Some(g) => {
                let mut h = vec![0.0; g.hidden()];
                let mut steps = Vec::with_capacity(l);
                let mut hs = Vec::with_capacity(l);
                for i in 0..l {
                    let (hn, c) = g.step(xs.row(i), &h);
                    steps.push(c);
                    hs.push(hn.clone());
                    h = hn;
                }
                let out = match self.reducer {
                    Reducer::Last => h,
                    Reducer::Mean => {
                        let mut m = vec![0.0; g.hidden()];
                        for hi in &hs {
                            crate::numerics::axpy(1.0, hi, &mut m);
                        }
                        m.iter_mut().for_each(|v| *v /= l as f64);
                        m
                    }
                };
                (
                    out,
                    ForwardCache {
                        xs: xs.clone(),
                        steps,
                        hs,
                    },
                )
            }
        }
    }

    /// Backprop of `dphi` through a cached forward pass. Recurrent parameter
    /// gradients accumulate into `grad` (when given); the gradient with
    /// respect to the input vectors is returned.
    pub fn backward(&self, cache: &ForwardCache, dphi: &[f64], grad: Option<&mut GruParams>) -> DenseMatrix {
        let l = cache.xs.rows();
        let mut dxs = cache.xs.zeros_like();
        match &self.params.gru {
            None => {
                for i in 0..l {
                    crate::numerics::axpy(1.0 / l as f64, dphi, dxs.row_mut(i));
                }
            }
            Some(g) => {
                let mut local;
                let grad = match grad {
                    Some(gr) => gr,
                    None => {
                        local = g.zeros_like();
                        &mut local
                    }
                };
                let hd = g.hidden();
                let mut dh = vec![0.0; hd];
                for t in (0..l).rev() {
                    match self.reducer {
                        Reducer::Mean => crate::numerics::axpy(1.0 / l as f64, dphi, &mut dh),
                        Reducer::Last if t == l - 1 => crate::numerics::axpy(1.0, dphi, &mut dh),
                        Reducer::Last => {}
                    }
                    dh = g.backward_step(cache.xs.row(t), &cache.steps[t], &dh, grad, dxs.row_mut(t));
                }
            }
        }
        dxs
    }

    /// Φ(x) for token ids: gathers word rows, then [`Encoder::encode_from_vectors`].
    pub fn encode(&self, ids: &[usize]) -> Result<Vec<f64>> {
        domain!(!ids.is_empty(), "cannot encode an empty sequence");
        contract!(ids.iter().all(|&i| i < self.vocab_size()), "token id out of vocabulary range");
        self.encode_from_vectors(&self.params.word.gather_rows(ids))
    }

    /// Ψ(x): the average of the word vectors, for both architectures.
    pub fn encode_lower(&self, ids: &[usize]) -> Result<Vec<f64>> {
        domain!(!ids.is_empty(), "cannot encode an empty sequence");
        contract!(ids.iter().all(|&i| i < self.vocab_size()), "token id out of vocabulary range");
        let mut out = vec![0.0; self.d_w()];
        for &i in ids {
            crate::numerics::axpy(1.0, self.params.word.row(i), &mut out);
        }
        out.iter_mut().for_each(|v| *v /= ids.len() as f64);
        Ok(out)
    }
}

/// A trained sentence encoder with its vocabulary and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEncoderModel {
    pub encoder: Encoder,
    pub vocab: Vocabulary,
    pub config: EncoderConfig,
}

impl SentenceEncoderModel {
    pub fn new(encoder: Encoder, vocab: Vocabulary, config: EncoderConfig) -> Self {
        Self { encoder, vocab, config }
    }

    pub fn d(&self) -> usize {
        self.encoder.d()
    }

    pub fn word_matrix(&self) -> &DenseMatrix {
        &self.encoder.params.word
    }

    fn check_len(&self, x: &[usize]) -> Result<()> {
        domain!(!x.is_empty(), "cannot encode an empty sequence");
        contract!(
            x.len() <= self.config.max_len,
            "sequence length {} exceeds max_len {}",
            x.len(),
            self.config.max_len
        );
        Ok(())
    }

    pub fn encode(&self, x: &[usize]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        self.encoder.encode(x)
    }

    pub fn encode_from_vectors(&self, xs: &DenseMatrix) -> Result<Vec<f64>> {
        self.encoder.encode_from_vectors(xs)
    }

    pub fn encode_lower(&self, x: &[usize]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        self.encoder.encode_lower(x)
    }

    /// Tokenizes, truncates to `max_len` and encodes.
    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        self.encode(&self.vocab.encode(text, self.config.max_len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradient_check;

    fn enc(arch: Arch, reducer: Reducer) -> Encoder {
        let cfg = EncoderConfig {
            arch,
            reducer,
            d_w: 6,
            hidden: 5,
            seed: 4,
            ..Default::default()
        };
        Encoder::init(12, &cfg)
    }

    #[test]
    fn mean_pool_examples() {
        let e = enc(Arch::MeanPool, Reducer::Mean);
        let v = &e.params.word;
        assert_eq!(e.encode(&[3]).unwrap(), v.row(3).to_vec());
        let two = e.encode(&[3, 7]).unwrap();
        for k in 0..6 {
            assert_eq!(two[k], (v.get(3, k) + v.get(7, k)) / 2.0);
        }
        let a = e.encode(&[1, 2, 3]).unwrap();
        let b = e.encode(&[3, 1, 2]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(e.encode(&[]), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn encode_matches_vector_path_bitwise() {
        for (arch, red) in [(Arch::MeanPool, Reducer::Mean), (Arch::Recurrent, Reducer::Mean), (Arch::Recurrent, Reducer::Last)] {
            let e = enc(arch, red);
            let ids = [4, 1, 9, 4];
            let xs = e.params.word.gather_rows(&ids);
            assert_eq!(e.encode(&ids).unwrap(), e.encode_from_vectors(&xs).unwrap());
        }
        let e = enc(Arch::MeanPool, Reducer::Mean);
        let u = e.params.word.row(2).to_vec();
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let xs = DenseMatrix::from_rows(&[u, neg]).unwrap();
        assert!(e.encode_from_vectors(&xs).unwrap().iter().all(|v| *v == 0.0));
        assert!(matches!(e.encode_from_vectors(&DenseMatrix::zeros(2, 3)), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn lower_view() {
        let m = enc(Arch::MeanPool, Reducer::Mean);
        assert_eq!(m.encode(&[1, 5]).unwrap(), m.encode_lower(&[1, 5]).unwrap());
        let r = enc(Arch::Recurrent, Reducer::Mean);
        assert_eq!(r.encode_lower(&[7]).unwrap(), r.params.word.row(7).to_vec());
        let ids = [2, 3, 8];
        let psi = crate::numerics::norm(&r.encode_lower(&ids).unwrap());
        let maxn = ids.iter().map(|&i| crate::numerics::norm(r.params.word.row(i))).fold(0.0, f64::max);
        assert!(psi <= maxn + 1e-12);
    }

    #[test]
    fn recurrent_is_order_sensitive() {
        let e = enc(Arch::Recurrent, Reducer::Mean);
        let a = e.encode(&[1, 2, 3]).unwrap();
        let b = e.encode(&[3, 2, 1]).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn vector_gradient_passes_check() {
        for (arch, red) in [(Arch::MeanPool, Reducer::Mean), (Arch::Recurrent, Reducer::Mean), (Arch::Recurrent, Reducer::Last)] {
            let e = enc(arch, red);
            let target: Vec<f64> = (0..e.d()).map(|k| (k as f64 * 0.37).sin()).collect();
            let xs = e.params.word.gather_rows(&[1, 4, 6]);
            let err = gradient_check(
                |x| {
                    let (phi, cache) = e.forward_vectors(x);
                    let diff: Vec<f64> = phi.iter().zip(&target).map(|(a, b)| a - b).collect();
                    let loss = diff.iter().map(|d| d * d).sum();
                    let dphi: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
                    (loss, e.backward(&cache, &dphi, None))
                },
                &xs,
            );
            assert!(err < 1e-4, "{arch:?} {red:?}: {err}");
        }
    }
}
