//! Bounded learned feedback `u = u* + |θ₁| ⊙ tanh(N(x̃, x*) x̃)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp};
use crate::error::{Error, Result};
use crate::num::mat::{lift_vec, norm_f64};
use crate::num::{Mat, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TanhController {
    n_x: usize,
    n_u: usize,
    gain: Vec<f64>,
    net: Mlp,
    /// Reference-state coordinates hidden from the network (x̃ is always
    /// passed in full).
    invariance_mask: Vec<usize>,
}

impl TanhController {
    pub fn new<R: Rng>(
        n_x: usize,
        n_u: usize,
        gain: &[f64],
        hidden: &[usize],
        invariance_mask: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if gain.len() != n_u {
            return Err(Error::dim(n_u, gain.len(), "controller gain"));
        }
        if invariance_mask.iter().any(|&i| i >= n_x) {
            return Err(Error::invalid("invariance mask index out of range"));
        }
        let n_in = n_x + n_x - invariance_mask.len();
        let mut widths = vec![n_in];
        widths.extend_from_slice(hidden);
        widths.push(n_u * n_x);
        let net = Mlp::new(&widths, Activation::Tanh, 1.0, rng)?;
        Ok(TanhController {
            n_x,
            n_u,
            gain: gain.to_vec(),
            net,
            invariance_mask: invariance_mask.to_vec(),
        })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    /// `‖θ₁‖₂`, the bound on `‖u − u*‖`.
    pub fn gain_norm(&self) -> f64 {
        norm_f64(&self.gain)
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    /// Layout: the `n_u` gains followed by the network parameters.
    pub fn n_params(&self) -> usize {
        self.n_u + self.net.n_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.gain.clone();
        p.extend_from_slice(self.net.params());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::dim(self.n_params(), p.len(), "controller parameters"));
        }
        self.net.set_params(&p[self.n_u..])?;
        self.gain.copy_from_slice(&p[..self.n_u]);
        Ok(())
    }

    fn net_input(&self, x_tilde: &[f64], x_star: &[f64]) -> Vec<f64> {
        let mut z = x_tilde.to_vec();
        z.extend(
            (0..self.n_x)
                .filter(|i| !self.invariance_mask.contains(i))
                .map(|i| x_star[i]),
        );
        z
    }

    /// `u` and `K = ∂u/∂x̃` with parameters `p`.
    pub fn u_and_gain_with<T: Real>(
        &self,
        p: &[T],
        x_tilde: &[f64],
        x_star: &[f64],
        u_star: &[f64],
    ) -> (Vec<T>, Mat<T>) {
        let (n_x, n_u) = (self.n_x, self.n_u);
        let z: Vec<T> = lift_vec(&self.net_input(x_tilde, x_star));
        let (raw, jac) = self.net.forward_jacobian_with(&p[n_u..], &z);
        let xt: Vec<T> = lift_vec(x_tilde);
        let mut u = Vec::with_capacity(n_u);
        let mut k = Mat::<T>::zeros(n_u, n_x);
        for i in 0..n_u {
            let row = &raw[i * n_x..(i + 1) * n_x];
            let t = T::affine(T::zero(), row, &xt).tanh();
            let g = p[i].abs();
            u.push(T::cst(u_star[i]) + g * t);
            let scale = g * (T::one() - t * t);
            for c in 0..n_x {
                // ∂(N_i · x̃)/∂x̃_c = N_ic + Σ_j ∂N_ij/∂x̃_c x̃_j
                let dn: Vec<T> = (0..n_x).map(|j| jac[(i * n_x + j, c)]).collect();
                let inner = row[c] + T::affine(T::zero(), &dn, &xt);
                k[(i, c)] = scale * inner;
            }
        }
        (u, k)
    }

    pub fn u_with<T: Real>(&self, p: &[T], x_tilde: &[f64], x_star: &[f64], u_star: &[f64]) -> Vec<T> {
        let n_x = self.n_x;
        let z: Vec<T> = lift_vec(&self.net_input(x_tilde, x_star));
        let raw = self.net.forward_with(&p[self.n_u..], &z);
        let xt: Vec<T> = lift_vec(x_tilde);
        (0..self.n_u)
            .map(|i| {
                let t = T::affine(T::zero(), &raw[i * n_x..(i + 1) * n_x], &xt).tanh();
                T::cst(u_star[i]) + p[i].abs() * t
            })
            .collect()
    }

    pub fn eval(&self, x_tilde: &[f64], x_star: &[f64], u_star: &[f64]) -> Result<Vec<f64>> {
        if x_tilde.len() != self.n_x {
            return Err(Error::dim(self.n_x, x_tilde.len(), "controller x̃"));
        }
        if x_star.len() != self.n_x {
            return Err(Error::dim(self.n_x, x_star.len(), "controller x*"));
        }
        if u_star.len() != self.n_u {
            return Err(Error::dim(self.n_u, u_star.len(), "controller u*"));
        }
        Ok(self.u_with(&self.params(), x_tilde, x_star, u_star))
    }

    /// `∂u/∂x̃` at the given point.
    pub fn gain_matrix(&self, x_tilde: &[f64], x_star: &[f64], u_star: &[f64]) -> Mat<f64> {
        self.u_and_gain_with(&self.params(), x_tilde, x_star, u_star).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::mat::dist_f64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn controller(seed: u64) -> TanhController {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TanhController::new(4, 2, &[0.2, -0.3], &[16], &[0, 1], &mut rng).unwrap()
    }

    #[test]
    fn zero_deviation_returns_reference() {
        let c = controller(1);
        let u = c.eval(&[0.0; 4], &[1.0, 2.0, 0.3, 0.5], &[0.4, -0.1]).unwrap();
        assert_eq!(u, vec![0.4, -0.1]);
    }

    #[test]
    fn feedback_bounded_by_gain_norm() {
        let c = controller(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let xt: Vec<f64> = (0..4).map(|_| rng.random_range(-1e6..1e6)).collect();
            let xs: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let us = [0.1, 0.2];
            let u = c.eval(&xt, &xs, &us).unwrap();
            assert!(dist_f64(&u, &us) <= c.gain_norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn gain_matrix_matches_finite_differences() {
        let c = controller(3);
        let xt = [0.05, -0.02, 0.1, 0.03];
        let xs = [1.0, 0.5, 0.2, 0.6];
        let us = [0.0, 0.1];
        let k = c.gain_matrix(&xt, &xs, &us);
        let h = 1e-6;
        for col in 0..4 {
            let mut p = xt;
            let mut m = xt;
            p[col] += h;
            m[col] -= h;
            let up = c.eval(&p, &xs, &us).unwrap();
            let um = c.eval(&m, &xs, &us).unwrap();
            for r in 0..2 {
                let fd = (up[r] - um[r]) / (2.0 * h);
                assert!((fd - k[(r, col)]).abs() < 1e-7, "{fd} vs {}", k[(r, col)]);
            }
        }
    }
}
