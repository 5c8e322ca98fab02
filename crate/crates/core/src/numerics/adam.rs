use crate::error::{contract, Result};
use crate::numerics::DenseMatrix;

/// Bias-corrected Adam state for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::zeros(rows, cols),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_param(param: &DenseMatrix, lr: f64) -> Self {
        Self::new(param.rows(), param.cols(), lr)
    }

    /// One Adam update of `param` in place.
    pub fn step(&mut self, param: &mut DenseMatrix, grad: &DenseMatrix) -> Result<()> {
        self.step_scaled(param, grad, 1.0)
    }

    /// Adam update with the learning rate multiplied by `lr_scale`.
    pub fn step_scaled(&mut self, param: &mut DenseMatrix, grad: &DenseMatrix, lr_scale: f64) -> Result<()> {
        contract!(
            param.shape() == grad.shape() && param.shape() == self.m.shape(),
            "adam shape mismatch: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            self.m.shape()
        );
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.lr * lr_scale;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let p = param.as_mut_slice();
        let g = grad.as_slice();
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(param: &mut DenseMatrix, grad: &DenseMatrix, state: &mut AdamState) -> Result<()> {
    state.step(param, grad)
}

/// A model whose parameters are an ordered list of dense blocks.
///
/// Gradients are represented by a value of the same type, so the block order
/// of a model and of its gradient always agree.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<&DenseMatrix>;
    fn blocks_mut(&mut self) -> Vec<&mut DenseMatrix>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in self.blocks() {
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn zero_grad(&mut self) {
        for b in self.blocks_mut() {
            b.fill(0.0);
        }
    }

    fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.is_finite())
    }
}

/// One [`AdamState`] per parameter block, sharing a learning rate.
#[derive(Debug, Clone)]
pub struct AdamGroup {
    states: Vec<AdamState>,
}

impl AdamGroup {
    pub fn new<P: ParamBlocks + ?Sized>(params: &P, lr: f64) -> Self {
        Self {
            states: params.blocks().into_iter().map(|b| AdamState::for_param(b, lr)).collect(),
        }
    }

    pub fn step<P: ParamBlocks + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let gs = grads.blocks();
        let ps = params.blocks_mut();
        contract!(ps.len() == self.states.len(), "adam group block count mismatch");
        for ((p, g), s) in ps.into_iter().zip(gs).zip(self.states.iter_mut()) {
            s.step(p, g)?;
        }
        Ok(())
    }
}
