use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::rng::{stream, streams};
use crate::numerics::{dot, ensure_finite, log_sum_exp, softmax_in_place, AdamGroup, DenseMatrix, ParamBlocks};

use super::rank_scores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextCnnConfig {
    pub d_emb: usize,
    pub filters: usize,
    pub width: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TextCnnConfig {
    fn default() -> Self {
        Self {
            d_emb: 32,
            filters: 128,
            width: 3,
            epochs: 30,
            lr: 0.001,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Token embedding, one bank of width-`w` filters with ReLU and max-pool
/// over positions, then a softmax layer. Short inputs are zero padded.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCnn {
    pub emb: DenseMatrix,
    /// `filters x (width * d_emb)`
    pub conv: DenseMatrix,
    pub conv_b: DenseMatrix,
    pub out: DenseMatrix,
    pub out_b: DenseMatrix,
    pub width: usize,
}

impl ParamBlocks for TextCnn {
    fn blocks(&self) -> Vec<&DenseMatrix> {
        vec![&self.emb, &self.conv, &self.conv_b, &self.out, &self.out_b]
    }

    fn blocks_mut(&mut self) -> Vec<&mut DenseMatrix> {
        vec![&mut self.emb, &mut self.conv, &mut self.conv_b, &mut self.out, &mut self.out_b]
    }
}

struct Pooled {
    windows: Vec<Vec<f64>>,
    /// Winning position per filter, `None` when ReLU is inactive.
    arg: Vec<Option<usize>>,
    m: Vec<f64>,
}

impl TextCnn {
    pub fn init(vocab_size: usize, n_classes: usize, cfg: &TextCnnConfig) -> Self {
        let mut rng = stream(cfg.seed, streams::BASELINE);
        let fan = (cfg.width * cfg.d_emb) as f64;
        let a_c = 1.0 / fan.sqrt();
        let a_o = 1.0 / (cfg.filters as f64).sqrt();
        Self {
            emb: DenseMatrix::random_normal(vocab_size, cfg.d_emb, 1.0 / (cfg.d_emb as f64).sqrt(), &mut rng),
            conv: DenseMatrix::random_uniform(cfg.filters, cfg.width * cfg.d_emb, -a_c, a_c, &mut rng),
            conv_b: DenseMatrix::zeros(1, cfg.filters),
            out: DenseMatrix::random_uniform(n_classes, cfg.filters, -a_o, a_o, &mut rng),
            out_b: DenseMatrix::zeros(1, n_classes),
            width: cfg.width,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            emb: self.emb.zeros_like(),
            conv: self.conv.zeros_like(),
            conv_b: self.conv_b.zeros_like(),
            out: self.out.zeros_like(),
            out_b: self.out_b.zeros_like(),
            width: self.width,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.out.rows()
    }

    fn window(&self, tokens: &[usize], p: usize) -> Vec<f64> {
        let d = self.emb.cols();
        let mut x = vec![0.0; self.width * d];
        for k in 0..self.width {
            if let Some(&t) = tokens.get(p + k) {
                x[k * d..(k + 1) * d].copy_from_slice(self.emb.row(t));
            }
        }
        x
    }

    fn pool(&self, tokens: &[usize]) -> Pooled {
        let positions = tokens.len().saturating_sub(self.width - 1).max(1);
        let windows: Vec<Vec<f64>> = (0..positions).map(|p| self.window(tokens, p)).collect();
        let nf = self.conv.rows();
        let mut m = vec![0.0; nf];
        let mut arg = vec![None; nf];
        let b = self.conv_b.as_slice();
        for f in 0..nf {
            for (p, x) in windows.iter().enumerate() {
                let a = dot(self.conv.row(f), x) + b[f];
                if a > m[f] {
                    m[f] = a;
                    arg[f] = Some(p);
                }
            }
        }
        Pooled { windows, arg, m }
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        contract!(tokens.iter().all(|&t| t < self.emb.rows()), "token id outside baseline vocabulary");
        let pooled = self.pool(tokens);
        let b = self.out_b.as_slice();
        Ok((0..self.n_classes()).map(|s| dot(self.out.row(s), &pooled.m) + b[s]).collect())
    }

    pub fn rank(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        Ok(rank_scores(&self.logits(tokens)?))
    }

    fn loss_grad(&self, tokens: &[usize], label: usize, g: &mut TextCnn, scale: f64) -> Result<f64> {
        let pooled = self.pool(tokens);
        let b = self.out_b.as_slice();
        let mut p: Vec<f64> = (0..self.n_classes()).map(|s| dot(self.out.row(s), &pooled.m) + b[s]).collect();
        let loss = log_sum_exp(&p) - p[label];
        softmax_in_place(&mut p, 1.0);
        p[label] -= 1.0;
        p.iter_mut().for_each(|v| *v *= scale);
        g.out.add_outer(1.0, &p, &pooled.m);
        for (a, d) in g.out_b.as_mut_slice().iter_mut().zip(&p) {
            *a += d;
        }
        let dm = self.out.t_matvec(&p);
        let d = self.emb.cols();
        for (f, arg) in pooled.arg.iter().enumerate() {
            let Some(pos) = *arg else { continue };
            let x = &pooled.windows[pos];
            for (a, xi) in g.conv.row_mut(f).iter_mut().zip(x) {
                *a += dm[f] * xi;
            }
            g.conv_b.as_mut_slice()[f] += dm[f];
            for k in 0..self.width {
                if let Some(&t) = tokens.get(pos + k) {
                    let w = &self.conv.row(f)[k * d..(k + 1) * d];
                    for (a, wi) in g.emb.row_mut(t).iter_mut().zip(w) {
                        *a += dm[f] * wi;
                    }
                }
            }
        }
        Ok(loss)
    }
}

/// Trains the convolutional baseline on labelled token sequences.
pub fn train_baseline_classifier(
    data: &[(Vec<usize>, usize)],
    vocab_size: usize,
    n_classes: usize,
    cfg: &TextCnnConfig,
) -> Result<TextCnn> {
    contract!(n_classes > 0, "baseline needs at least one class");
    contract!(cfg.width > 0 && cfg.filters > 0, "baseline needs filters of positive width");
    let mut seen = vec![false; n_classes];
    for (tokens, s) in data {
        contract!(*s < n_classes, "class id {s} out of range");
        contract!(tokens.iter().all(|&t| t < vocab_size), "token id outside vocabulary");
        seen[*s] = true;
    }
    contract!(seen.iter().all(|v| *v), "every class needs a labelled example");
    let mut model = TextCnn::init(vocab_size, n_classes, cfg);
    let mut opt = AdamGroup::new(&model, cfg.lr);
    let mut rng = stream(cfg.seed, streams::BASELINE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut g = model.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            let mut total = 0.0;
            for &i in chunk {
                total += model.loss_grad(&data[i].0, data[i].1, &mut g, scale)?;
            }
            ensure_finite(total, "baseline loss")?;
            opt.step(&mut model, &g)?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradient_check_report;
    use rand::Rng;

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = TextCnnConfig {
            d_emb: 3,
            filters: 4,
            ..Default::default()
        };
        let base = TextCnn::init(7, 3, &cfg);
        let data: Vec<(Vec<usize>, usize)> = vec![(vec![1, 2, 3, 4], 0), (vec![5, 6], 2), (vec![2, 2, 6, 1, 3], 1)];
        let flat = DenseMatrix::from_vec(1, base.num_params(), base.flatten()).unwrap();
        let mut f = |x: &DenseMatrix| {
            let mut m = base.clone();
            m.assign_flat(x.as_slice());
            let mut g = m.zeros_like();
            let mut l = 0.0;
            for (t, s) in &data {
                l += m.loss_grad(t, *s, &mut g, 1.0 / 3.0).unwrap() / 3.0;
            }
            (l, DenseMatrix::from_vec(1, g.num_params(), g.flatten()).unwrap())
        };
        let rep = gradient_check_report(&mut f, &flat, 2);
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn memorises_ten_sentences_and_is_seeded() {
        let mut rng = crate::numerics::rng::stream(1, 1);
        let data: Vec<(Vec<usize>, usize)> = (0..10).map(|i| ((0..6).map(|_| rng.random_range(0..40)).collect(), i % 5)).collect();
        let cfg = TextCnnConfig {
            epochs: 200,
            lr: 0.01,
            ..Default::default()
        };
        let m = train_baseline_classifier(&data, 40, 5, &cfg).unwrap();
        for (t, s) in &data {
            assert_eq!(m.rank(t).unwrap()[0], *s);
        }
        assert_eq!(m, train_baseline_classifier(&data, 40, 5, &cfg).unwrap());
        assert!(m.rank(&[1]).is_ok());
        assert!(train_baseline_classifier(&data, 40, 6, &cfg).is_err());
    }
}
