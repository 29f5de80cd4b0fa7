//! Learned control-affine surrogate `g(x, u) = f(x) + B(x) u`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dynamics;
use crate::error::{Error, Result};
use crate::nnet::{Activation, Mlp};
use crate::num::mat::lift_vec;
use crate::num::{Mat, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlAffineModel {
    n_x: usize,
    n_u: usize,
    f_net: Mlp,
    /// Outputs `B` row-major (`n_x × n_u`), or only its bottom `n_u × n_u`
    /// block when `sparse_b` is set.
    b_net: Mlp,
    sparse_b: bool,
}

impl ControlAffineModel {
    pub fn new<R: Rng>(
        n_x: usize,
        n_u: usize,
        f_hidden: &[usize],
        b_hidden: &[usize],
        sparse_b: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if sparse_b && n_u > n_x {
            return Err(Error::invalid("sparse B needs n_u ≤ n_x"));
        }
        let widths = |hidden: &[usize], out: usize| {
            let mut w = vec![n_x];
            w.extend_from_slice(hidden);
            w.push(out);
            w
        };
        let b_out = if sparse_b { n_u * n_u } else { n_x * n_u };
        let f_net = Mlp::new(&widths(f_hidden, n_x), Activation::Tanh, 1.0, rng)?;
        let b_net = Mlp::new(&widths(b_hidden, b_out), Activation::Tanh, 1.0, rng)?;
        Ok(ControlAffineModel {
            n_x,
            n_u,
            f_net,
            b_net,
            sparse_b,
        })
    }

    /// Exact model of `ẋ = A x + B u`. When `sparse_b` is set the top
    /// `(n_x − n_u)` rows of `b` must be zero.
    pub fn linear(a: &Mat<f64>, b: &Mat<f64>, sparse_b: bool) -> Result<Self> {
        let (n_x, n_u) = (b.rows(), b.cols());
        if a.rows() != n_x || a.cols() != n_x {
            return Err(Error::dim(n_x, a.rows(), "linear model A"));
        }
        let f_net = Mlp::affine(a, &vec![0.0; n_x])?;
        let bias: Vec<f64> = if sparse_b {
            let top = b.block(0, 0, n_x - n_u, n_u);
            if top.max_abs() != 0.0 {
                return Err(Error::invalid("sparse B requires a zero top block"));
            }
            b.block(n_x - n_u, 0, n_u, n_u).into_vec()
        } else {
            b.as_slice().to_vec()
        };
        let b_net = Mlp::affine(&Mat::zeros(bias.len(), n_x), &bias)?;
        Ok(ControlAffineModel {
            n_x,
            n_u,
            f_net,
            b_net,
            sparse_b,
        })
    }

    pub fn sparse_b(&self) -> bool {
        self.sparse_b
    }

    pub fn f_net(&self) -> &Mlp {
        &self.f_net
    }

    pub fn b_net(&self) -> &Mlp {
        &self.b_net
    }

    /// Layout: `f` parameters then `B` parameters.
    pub fn n_params(&self) -> usize {
        self.f_net.n_params() + self.b_net.n_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.f_net.params().to_vec();
        p.extend_from_slice(self.b_net.params());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::dim(self.n_params(), p.len(), "model parameters"));
        }
        let nf = self.f_net.n_params();
        self.f_net.set_params(&p[..nf])?;
        self.b_net.set_params(&p[nf..])
    }

    fn b_from_raw<T: Real>(&self, raw: &[T]) -> Mat<T> {
        let (n_x, n_u) = (self.n_x, self.n_u);
        if self.sparse_b {
            let off = n_x - n_u;
            Mat::from_fn(
                n_x,
                n_u,
                |i, j| if i < off { T::zero() } else { raw[(i - off) * n_u + j] },
            )
        } else {
            Mat::from_vec(n_x, n_u, raw.to_vec()).expect("B output shape")
        }
    }

    /// `g(x, u)` with parameters `p` (same layout as [`Self::params`]).
    pub fn eval_with<T: Real>(&self, p: &[T], x: &[T], u: &[T]) -> Vec<T> {
        let nf = self.f_net.n_params();
        let f = self.f_net.forward_with(&p[..nf], x);
        let b = self.b_from_raw(&self.b_net.forward_with(&p[nf..], x));
        let bu = b.mul_vec(u);
        f.into_iter().zip(bu).map(|(a, c)| a + c).collect()
    }

    pub fn eval_learned(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_x {
            return Err(Error::dim(self.n_x, x.len(), "state"));
        }
        if u.len() != self.n_u {
            return Err(Error::dim(self.n_u, u.len(), "control"));
        }
        Ok(self.g(x, u))
    }

    fn g(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let f = self.f_net.forward_with(self.f_net.params(), x);
        let b = self.b(x);
        let bu = b.mul_vec(u);
        f.into_iter().zip(bu).map(|(a, c)| a + c).collect()
    }

    pub fn f(&self, x: &[f64]) -> Vec<f64> {
        self.f_net.forward_with(self.f_net.params(), x)
    }

    pub fn b(&self, x: &[f64]) -> Mat<f64> {
        self.b_from_raw(&self.b_net.forward_with(self.b_net.params(), x))
    }

    pub fn df_dx(&self, x: &[f64]) -> Mat<f64> {
        self.f_net.forward_jacobian_with(self.f_net.params(), x).1
    }

    /// `∂Bʲ/∂x` for each control channel `j` (column `j` of `B`).
    pub fn db_dx(&self, x: &[f64]) -> Vec<Mat<f64>> {
        let (n_x, n_u) = (self.n_x, self.n_u);
        let jac = self.b_net.forward_jacobian_with(self.b_net.params(), x).1;
        (0..n_u)
            .map(|j| {
                Mat::from_fn(n_x, n_x, |i, c| {
                    if self.sparse_b {
                        let off = n_x - n_u;
                        if i < off {
                            0.0
                        } else {
                            jac[((i - off) * n_u + j, c)]
                        }
                    } else {
                        jac[(i * n_u + j, c)]
                    }
                })
            })
            .collect()
    }

    /// `A = ∂f/∂x + Σ uʲ ∂Bʲ/∂x`.
    pub fn state_jacobian(&self, x: &[f64], u: &[f64]) -> Mat<f64> {
        let mut a = self.df_dx(x);
        for (j, db) in self.db_dx(x).iter().enumerate() {
            a.add_assign_scaled(db, u[j]);
        }
        a
    }

    pub fn lifted_params<T: Real>(&self) -> Vec<T> {
        lift_vec(&self.params())
    }
}

impl Dynamics for ControlAffineModel {
    fn n_x(&self) -> usize {
        self.n_x
    }
    fn n_u(&self) -> usize {
        self.n_u
    }
    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.g(x, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(sparse: bool) -> ControlAffineModel {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        ControlAffineModel::new(4, 2, &[16], &[8], sparse, &mut rng).unwrap()
    }

    #[test]
    fn zero_control_gives_drift() {
        let g = model(false);
        let x = [0.1, 0.2, -0.3, 0.5];
        assert_eq!(g.eval_learned(&x, &[0.0, 0.0]).unwrap(), g.f(&x));
    }

    #[test]
    fn affine_in_control() {
        let g = model(false);
        let x = [0.3, -0.2, 0.1, 0.9];
        let (u1, u2) = ([0.4, -0.7], [1.1, 0.2]);
        let sum = [u1[0] + u2[0], u1[1] + u2[1]];
        let lhs: Vec<f64> = g
            .eval(&x, &sum)
            .iter()
            .zip(g.eval(&x, &u2))
            .map(|(a, b)| a - b)
            .collect();
        let rhs: Vec<f64> = g
            .eval(&x, &u1)
            .iter()
            .zip(g.eval(&x, &[0.0, 0.0]))
            .map(|(a, b)| a - b)
            .collect();
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_top_rows_ignore_control() {
        let g = model(true);
        let x = [0.3, -0.2, 0.1, 0.9];
        let a = g.eval(&x, &[0.0, 0.0]);
        let b = g.eval(&x, &[3.0, -5.0]);
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
        assert!(g.db_dx(&x).iter().all(|m| m.block(0, 0, 2, 4).max_abs() == 0.0));
    }

    #[test]
    fn db_dx_matches_finite_differences() {
        for sparse in [false, true] {
            let g = model(sparse);
            let x = [0.3, -0.2, 0.1, 0.9];
            let db = g.db_dx(&x);
            let h = 1e-6;
            for c in 0..4 {
                let mut xp = x;
                let mut xm = x;
                xp[c] += h;
                xm[c] -= h;
                let fd = g.b(&xp).sub(&g.b(&xm)).scale(0.5 / h);
                for j in 0..2 {
                    for i in 0..4 {
                        assert!((fd[(i, j)] - db[j][(i, c)]).abs() < 1e-7);
                    }
                }
            }
        }
    }
}
