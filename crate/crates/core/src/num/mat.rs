//! Small dense row-major matrices, generic over [`Real`].
//!
//! Dimensions in this crate never exceed a few dozen, so everything is a
//! straightforward triple loop.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use super::real::Real;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(rows * cols, data.len(), "matrix data"));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn lift(m: &Mat<f64>) -> Self {
        Mat {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|&v| T::cst(v)).collect(),
        }
    }

    pub fn values(&self) -> Mat<f64> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.val()).collect(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat<T>) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "mul_vec shape mismatch");
        (0..self.rows)
            .map(|i| {
                let mut acc = T::zero();
                for (a, &b) in self.row(i).iter().zip(v) {
                    acc += *a * b;
                }
                acc
            })
            .collect()
    }

    /// `vᵀ A` as a row vector.
    pub fn vec_mul(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len(), "vec_mul shape mismatch");
        (0..self.cols)
            .map(|j| {
                let mut acc = T::zero();
                for (i, &vi) in v.iter().enumerate() {
                    acc += vi * self[(i, j)];
                }
                acc
            })
            .collect()
    }

    pub fn add(&self, other: &Mat<T>) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Mat<T>) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Mat<T>, s: T) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    /// `Q + Qᵀ`.
    pub fn hat(&self) -> Self {
        assert!(self.is_square());
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, j)] + self[(j, i)])
    }

    /// `(Q + Qᵀ) / 2`.
    pub fn symmetric_part(&self) -> Self {
        let half = T::cst(0.5);
        self.hat().scale(half)
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    pub fn trace(&self) -> T {
        let mut acc = T::zero();
        for i in 0..self.rows.min(self.cols) {
            acc += self[(i, i)];
        }
        acc
    }

    /// Inverse by Gauss-Jordan elimination; pivots are chosen on values.
    pub fn inverse(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::invalid("inverse of non-square matrix"));
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        for col in 0..n {
            let mut piv = col;
            let mut best = a[(col, col)].val().abs();
            for r in col + 1..n {
                let v = a[(r, col)].val().abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if !(best > 0.0) || !best.is_finite() {
                return Err(Error::Degenerate("singular matrix in inverse".into()));
            }
            if piv != col {
                a.swap_rows(piv, col);
                inv.swap_rows(piv, col);
            }
            let p = a[(col, col)];
            for j in 0..n {
                a[(col, j)] = a[(col, j)] / p;
                inv[(col, j)] = inv[(col, j)] / p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a[(r, col)];
                for j in 0..n {
                    let ac = a[(col, j)];
                    let ic = inv[(col, j)];
                    a[(r, j)] -= factor * ac;
                    inv[(r, j)] -= factor * ic;
                }
            }
        }
        Ok(inv)
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        for j in 0..self.cols {
            self.data.swap(a * self.cols + j, b * self.cols + j);
        }
    }

    /// Upper-triangular `R` with `A = RᵀR`.
    pub fn cholesky_upper(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::invalid("cholesky of non-square matrix"));
        }
        let n = self.rows;
        let mut r = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= r[(k, j)] * r[(k, j)];
            }
            if !(d.val() > 0.0) {
                return Err(Error::Degenerate("matrix not positive definite".into()));
            }
            let djj = d.sqrt();
            r[(j, j)] = djj;
            for i in j + 1..n {
                let mut s = self[(j, i)];
                for k in 0..j {
                    s -= r[(k, j)] * r[(k, i)];
                }
                r[(j, i)] = s / djj;
            }
        }
        Ok(r)
    }

    /// Inverse of an upper-triangular matrix by back substitution.
    pub fn upper_triangular_inverse(&self) -> Result<Self> {
        let n = self.rows;
        let mut inv = Self::zeros(n, n);
        for i in (0..n).rev() {
            let d = self[(i, i)];
            if d.val() == 0.0 {
                return Err(Error::Degenerate("zero diagonal in triangular inverse".into()));
            }
            inv[(i, i)] = T::one() / d;
            for j in i + 1..n {
                let mut s = T::zero();
                for k in i + 1..=j {
                    s += self[(i, k)] * inv[(k, j)];
                }
                inv[(i, j)] = -s / d;
            }
        }
        Ok(inv)
    }

    pub fn frobenius_norm(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.val().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.val().is_finite())
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn norm_f64(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dist_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn lift_vec<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::cst(x)).collect()
}

pub fn values<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.val()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_spd() {
        let a = Mat::from_vec(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]).unwrap();
        let inv = a.inverse().unwrap();
        let id = a.matmul(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((id[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = Mat::from_vec(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]).unwrap();
        let r = a.cholesky_upper().unwrap();
        let back = r.transpose().matmul(&r);
        assert!(back.sub(&a).max_abs() < 1e-12);
        let rinv = r.upper_triangular_inverse().unwrap();
        assert!(r.matmul(&rinv).sub(&Mat::identity(3)).max_abs() < 1e-12);
    }

    #[test]
    fn singular_inverse_fails() {
        let a = Mat::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(a.inverse().is_err());
    }
}
