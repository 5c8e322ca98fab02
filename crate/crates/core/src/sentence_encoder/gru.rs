//! Single-layer GRU cell with a hand-written backward pass.
//!
//! Gate blocks are stacked row-wise in the order reset, update, candidate:
//!
//! ```text
//! r  = sigmoid(W_r x + U_r h + b_r)
//! u  = sigmoid(W_u x + U_u h + b_u)
//! n  = tanh(W_n x + U_n (r * h) + b_n)
//! h' = (1 - u) * n + u * h
//! ```

use rand::Rng;

use crate::numerics::{sigmoid, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    /// `3h x d_in`
    pub w: DenseMatrix,
    /// `3h x h`
    pub u: DenseMatrix,
    /// `1 x 3h`
    pub b: DenseMatrix,
}

/// Saved activations of one step.
#[derive(Debug, Clone)]
pub struct GruStep {
    pub h_prev: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
}

/// `out[k] += sum_j m[r0 + k][j] * x[j]`
pub(crate) fn mv_add(m: &DenseMatrix, r0: usize, x: &[f64], out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        *o += crate::numerics::dot(m.row(r0 + k), x);
    }
}

/// `out[j] += sum_k m[r0 + k][j] * g[k]`
pub(crate) fn mtv_add(m: &DenseMatrix, r0: usize, g: &[f64], out: &mut [f64]) {
    for (k, &gk) in g.iter().enumerate() {
        if gk != 0.0 {
            crate::numerics::axpy(gk, m.row(r0 + k), out);
        }
    }
}

/// `m[r0 + k][j] += g[k] * x[j]`
pub(crate) fn outer_add(m: &mut DenseMatrix, r0: usize, g: &[f64], x: &[f64]) {
    for (k, &gk) in g.iter().enumerate() {
        if gk != 0.0 {
            crate::numerics::axpy(gk, x, m.row_mut(r0 + k));
        }
    }
}

impl GruParams {
    /// Uniform in `[-1/sqrt(h), 1/sqrt(h)]`, zero biases.
    pub fn init(d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let a = 1.0 / (hidden as f64).sqrt();
        Self {
            w: DenseMatrix::random_uniform(3 * hidden, d_in, -a, a, rng),
            u: DenseMatrix::random_uniform(3 * hidden, hidden, -a, a, rng),
            b: DenseMatrix::zeros(1, 3 * hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: self.w.zeros_like(),
            u: self.u.zeros_like(),
            b: self.b.zeros_like(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    /// One step; returns `h'` and the cache needed by [`GruParams::backward_step`].
    pub fn step(&self, x: &[f64], h: &[f64]) -> (Vec<f64>, GruStep) {
        let hd = self.hidden();
        let b = self.b.as_slice();
        let mut r = b[..hd].to_vec();
        let mut z = b[hd..2 * hd].to_vec();
        let mut n = b[2 * hd..].to_vec();
        mv_add(&self.w, 0, x, &mut r);
        mv_add(&self.u, 0, h, &mut r);
        mv_add(&self.w, hd, x, &mut z);
        mv_add(&self.u, hd, h, &mut z);
        r.iter_mut().for_each(|v| *v = sigmoid(*v));
        z.iter_mut().for_each(|v| *v = sigmoid(*v));
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        mv_add(&self.w, 2 * hd, x, &mut n);
        mv_add(&self.u, 2 * hd, &rh, &mut n);
        n.iter_mut().for_each(|v| *v = v.tanh());
        let h_new = (0..hd).map(|k| (1.0 - z[k]) * n[k] + z[k] * h[k]).collect();
        (
            h_new,
            GruStep {
                h_prev: h.to_vec(),
                r,
                z,
                n,
            },
        )
    }

    /// Backward through one step. Accumulates parameter gradients into
    /// `grad`, adds the input gradient into `dx`, and returns `dL/dh_prev`.
    pub fn backward_step(&self, x: &[f64], c: &GruStep, dh: &[f64], grad: &mut GruParams, dx: &mut [f64]) -> Vec<f64> {
        let hd = self.hidden();
        let h = &c.h_prev;
        let mut dh_prev: Vec<f64> = (0..hd).map(|k| dh[k] * c.z[k]).collect();
        let da_n: Vec<f64> = (0..hd).map(|k| dh[k] * (1.0 - c.z[k]) * (1.0 - c.n[k] * c.n[k])).collect();
        let da_z: Vec<f64> = (0..hd).map(|k| dh[k] * (h[k] - c.n[k]) * c.z[k] * (1.0 - c.z[k])).collect();
        let rh: Vec<f64> = c.r.iter().zip(h).map(|(a, b)| a * b).collect();
        let mut drh = vec![0.0; hd];
        mtv_add(&self.u, 2 * hd, &da_n, &mut drh);
        let da_r: Vec<f64> = (0..hd).map(|k| drh[k] * h[k] * c.r[k] * (1.0 - c.r[k])).collect();
        for k in 0..hd {
            dh_prev[k] += drh[k] * c.r[k];
        }
        mtv_add(&self.u, 0, &da_r, &mut dh_prev);
        mtv_add(&self.u, hd, &da_z, &mut dh_prev);

        outer_add(&mut grad.w, 0, &da_r, x);
        outer_add(&mut grad.w, hd, &da_z, x);
        outer_add(&mut grad.w, 2 * hd, &da_n, x);
        outer_add(&mut grad.u, 0, &da_r, h);
        outer_add(&mut grad.u, hd, &da_z, h);
        outer_add(&mut grad.u, 2 * hd, &da_n, &rh);
        let gb = grad.b.as_mut_slice();
        for k in 0..hd {
            gb[k] += da_r[k];
            gb[hd + k] += da_z[k];
            gb[2 * hd + k] += da_n[k];
        }
        mtv_add(&self.w, 0, &da_r, dx);
        mtv_add(&self.w, hd, &da_z, dx);
        mtv_add(&self.w, 2 * hd, &da_n, dx);
        dh_prev
    }
}
