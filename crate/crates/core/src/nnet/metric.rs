//! Dual metric `W(x) = W_θ(x)ᵀ W_θ(x) + w̲ I` and its inverse `M = W⁻¹`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp};
use crate::error::{Error, Result};
use crate::num::mat::lift_vec;
use crate::num::{Mat, Real, SymMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdMetricNet {
    n: usize,
    base: Mlp,
    floor: f64,
    /// State indices the metric may depend on.
    input_mask: Vec<usize>,
}

impl PsdMetricNet {
    pub fn new<R: Rng>(n: usize, input_mask: &[usize], hidden: &[usize], floor: f64, rng: &mut R) -> Result<Self> {
        let mut widths = vec![input_mask.len().max(1)];
        widths.extend_from_slice(hidden);
        widths.push(n * n);
        let base = Mlp::new(&widths, Activation::Tanh, 1.0, rng)?;
        Self::from_base(n, base, floor, input_mask)
    }

    pub fn from_base(n: usize, base: Mlp, floor: f64, input_mask: &[usize]) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::invalid(format!("metric floor must be positive, got {floor}")));
        }
        if base.output_dim() != n * n {
            return Err(Error::dim(n * n, base.output_dim(), "metric network output"));
        }
        if base.input_dim() != input_mask.len().max(1) {
            return Err(Error::dim(
                input_mask.len().max(1),
                base.input_dim(),
                "metric network input",
            ));
        }
        if input_mask.iter().any(|&i| i >= n) {
            return Err(Error::invalid("metric input mask index out of range"));
        }
        Ok(PsdMetricNet {
            n,
            base,
            floor,
            input_mask: input_mask.to_vec(),
        })
    }

    /// A state-independent metric equal to `w`, which must satisfy
    /// `w − floor·I ≻ 0`.
    pub fn constant(w: &Mat<f64>, floor: f64, input_mask: &[usize]) -> Result<Self> {
        let n = w.rows();
        let shifted = w.sub(&Mat::identity(n).scale(floor));
        let r = shifted.cholesky_upper()?;
        let base = Mlp::affine(&Mat::zeros(n * n, input_mask.len().max(1)), r.as_slice())?;
        Self::from_base(n, base, floor, input_mask)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn input_mask(&self) -> &[usize] {
        &self.input_mask
    }

    pub fn base(&self) -> &Mlp {
        &self.base
    }

    pub fn n_params(&self) -> usize {
        self.base.n_params()
    }

    pub fn params(&self) -> &[f64] {
        self.base.params()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        self.base.set_params(p)
    }

    fn masked_input(&self, x: &[f64]) -> Vec<f64> {
        if self.input_mask.is_empty() {
            return vec![0.0];
        }
        self.input_mask.iter().map(|&i| x[i]).collect()
    }

    fn assemble<T: Real>(&self, raw: &[T]) -> (Mat<T>, Mat<T>) {
        let wt = Mat::from_vec(self.n, self.n, raw.to_vec()).expect("metric output shape");
        let w = wt
            .transpose()
            .matmul(&wt)
            .add(&Mat::identity(self.n).scale(T::cst(self.floor)));
        (wt, w)
    }

    /// `W(x)` with parameters `p`.
    pub fn w_with<T: Real>(&self, p: &[T], x: &[f64]) -> Mat<T> {
        let z: Vec<T> = lift_vec(&self.masked_input(x));
        self.assemble(&self.base.forward_with(p, &z)).1
    }

    /// `W(x)` and `∂W/∂xⁱ` for every state coordinate (zero for masked ones).
    pub fn w_and_grad_with<T: Real>(&self, p: &[T], x: &[f64]) -> (Mat<T>, Vec<Mat<T>>) {
        let z: Vec<T> = lift_vec(&self.masked_input(x));
        let (raw, jac) = self.base.forward_jacobian_with(p, &z);
        let (wt, w) = self.assemble(&raw);
        let mut grads = vec![Mat::<T>::zeros(self.n, self.n); x.len()];
        for (col, &i) in self.input_mask.iter().enumerate() {
            let dwt = Mat::from_vec(self.n, self.n, jac.column(col)).expect("metric jacobian shape");
            let prod = dwt.transpose().matmul(&wt);
            grads[i] = prod.add(&prod.transpose());
        }
        (w, grads)
    }

    pub fn w(&self, x: &[f64]) -> Mat<f64> {
        self.w_with(self.base.params(), x)
    }

    pub fn w_and_grad(&self, x: &[f64]) -> (Mat<f64>, Vec<Mat<f64>>) {
        self.w_and_grad_with(self.base.params(), x)
    }

    /// `M(x) = W(x)⁻¹`.
    pub fn m(&self, x: &[f64]) -> Mat<f64> {
        self.w(x).inverse().expect("W is positive definite by construction")
    }

    /// `(W, M)` at `x`. Logs a warning when the condition number of `W`
    /// exceeds 1e12.
    pub fn eval(&self, x: &[f64]) -> Result<(SymMatrix, SymMatrix)> {
        if x.len() != self.n {
            return Err(Error::dim(self.n, x.len(), "metric state"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite state"));
        }
        let w = SymMatrix::from_nearly_symmetric(&self.w(x))?;
        let e = w.eigen();
        if e.max_value() / e.min_value() > 1e12 {
            log::warn!(
                "metric condition number {:.3e} at {:?}",
                e.max_value() / e.min_value(),
                x
            );
        }
        let m = SymMatrix::from_nearly_symmetric(&w.as_mat().inverse()?)?;
        Ok((w, m))
    }
}
