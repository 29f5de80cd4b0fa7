//! Scalar abstraction shared by plain `f64` evaluation and the reverse-mode tape.
//!
//! Every network, contraction-matrix and loss routine is written once against
//! [`Real`]; certification and control run it on `f64`, training runs it on
//! [`crate::nnet::tape::Var`].

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use super::mat::Mat;

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;

    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;

    /// `ln(1 + e^x)`, evaluated stably.
    fn softplus(self) -> Self;

    /// Largest eigenvalue of a symmetric matrix. The matrix is symmetrized
    /// by value before the decomposition.
    fn max_eig(a: &Mat<Self>) -> Self;

    /// Smallest eigenvalue of a symmetric matrix.
    fn min_eig(a: &Mat<Self>) -> Self;

    /// `b + Σ w_k x_k`.
    fn affine(b: Self, w: &[Self], x: &[Self]) -> Self {
        let mut acc = b;
        for (&wk, &xk) in w.iter().zip(x) {
            acc += wk * xk;
        }
        acc
    }

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    fn powi(self, n: u32) -> Self {
        let mut acc = Self::one();
        for _ in 0..n {
            acc *= self;
        }
        acc
    }

    /// Larger of two values; the gradient flows through the selected branch.
    fn max(self, other: Self) -> Self {
        if self.val() >= other.val() {
            self
        } else {
            other
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn max_eig(a: &Mat<Self>) -> Self {
        super::linalg::sym_eigen(a).max_value()
    }
    fn min_eig(a: &Mat<Self>) -> Self {
        super::linalg::sym_eigen(a).min_value()
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
