//! Fully connected networks with a flat parameter vector.
//!
//! Parameter layout, per layer in order: the `out × in` weight matrix in
//! row-major order, then the `out` biases.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::mat::lift_vec;
use crate::num::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
    Linear,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.softplus(),
            Activation::Linear => x,
        }
    }

    /// Derivative given the pre-activation `x` and the activation value `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Softplus => (x - y).exp(),
            Activation::Linear => T::one(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

impl Mlp {
    /// Network with all parameters zero.
    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("network needs at least input and output widths"));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::dim(widths.len() - 1, activations.len(), "activations per layer"));
        }
        if widths.contains(&0) {
            return Err(Error::invalid("zero layer width"));
        }
        let n: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Mlp {
            widths: widths.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// Hidden layers use `hidden`, the output layer is linear. Weights are
    /// Glorot-normal scaled by `gain`, biases zero.
    pub fn new<R: Rng>(widths: &[usize], hidden: Activation, gain: f64, rng: &mut R) -> Result<Self> {
        let mut acts = vec![hidden; widths.len().saturating_sub(2)];
        acts.push(Activation::Linear);
        let mut net = Self::zeros(widths, &acts)?;
        let mut off = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let sd = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, sd).expect("finite std");
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = normal.sample(rng);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    /// Single affine layer `y = A z + b`.
    pub fn affine(a: &Mat<f64>, b: &[f64]) -> Result<Self> {
        if b.len() != a.rows() {
            return Err(Error::dim(a.rows(), b.len(), "affine bias"));
        }
        let mut net = Self::zeros(&[a.cols(), a.rows()], &[Activation::Linear])?;
        net.params[..a.rows() * a.cols()].copy_from_slice(a.as_slice());
        net.params[a.rows() * a.cols()..].copy_from_slice(b);
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::dim(self.params.len(), p.len(), "network parameters"));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite network parameter"));
        }
        self.params.copy_from_slice(p);
        Ok(())
    }

    /// Forward pass with externally supplied parameters (same layout).
    pub fn forward_with<T: Real>(&self, params: &[T], z: &[T]) -> Vec<T> {
        debug_assert_eq!(params.len(), self.params.len());
        debug_assert_eq!(z.len(), self.widths[0]);
        let mut h = z.to_vec();
        let mut off = 0;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[off..off + n_in * n_out];
            let bias = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            let act = self.activations[l];
            h = (0..n_out)
                .map(|i| act.apply(T::affine(bias[i], &weights[i * n_in..(i + 1) * n_in], &h)))
                .collect();
            off += n_in * n_out + n_out;
        }
        h
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        Ok(self.forward_with(&self.params, z))
    }

    /// Output and its Jacobian with respect to the input, by forward-mode
    /// tangent propagation.
    pub fn forward_jacobian_with<T: Real>(&self, params: &[T], z: &[T]) -> (Vec<T>, Mat<T>) {
        let n0 = self.widths[0];
        let mut h = z.to_vec();
        // Row c holds the tangent along input direction c.
        let mut tangents = Mat::<T>::identity(n0);
        let mut off = 0;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[off..off + n_in * n_out];
            let bias = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            let act = self.activations[l];
            let mut next = Vec::with_capacity(n_out);
            let mut tnext = Mat::<T>::zeros(n0, n_out);
            for i in 0..n_out {
                let wi = &weights[i * n_in..(i + 1) * n_in];
                let pre = T::affine(bias[i], wi, &h);
                let y = act.apply(pre);
                let d = act.derivative(pre, y);
                for c in 0..n0 {
                    let dpre = T::affine(T::zero(), wi, tangents.row(c));
                    tnext[(c, i)] = match act {
                        Activation::Linear => dpre,
                        _ => d * dpre,
                    };
                }
                next.push(y);
            }
            h = next;
            tangents = tnext;
            off += n_in * n_out + n_out;
        }
        (h, tangents.transpose())
    }

    pub fn input_jacobian(&self, z: &[f64]) -> Result<Mat<f64>> {
        self.check_input(z)?;
        Ok(self.forward_jacobian_with(&self.params, z).1)
    }

    /// Parameters lifted into another scalar type as constants.
    pub fn lifted_params<T: Real>(&self) -> Vec<T> {
        lift_vec(&self.params)
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.widths[0] {
            return Err(Error::dim(self.widths[0], z.len(), "network input"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias() {
        let mut net = Mlp::zeros(&[3, 2], &[Activation::Linear]).unwrap();
        let n = net.n_params();
        net.params_mut()[n - 2..].copy_from_slice(&[0.7, -1.2]);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.7, -1.2]);
    }

    #[test]
    fn linear_layer_is_matmul() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let net = Mlp::affine(&a, &[0.0, 0.0]).unwrap();
        let z = [0.3, -0.2, 1.1];
        assert_eq!(net.forward(&z).unwrap(), a.mul_vec(&z));
        assert_eq!(net.input_jacobian(&z).unwrap(), a);
    }

    #[test]
    fn dimension_mismatch() {
        let net = Mlp::zeros(&[3, 2], &[Activation::Linear]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn tanh_unit_slope_at_origin() {
        let a = Mat::from_vec(1, 1, vec![1.0]).unwrap();
        let mut net = Mlp::zeros(&[1, 1], &[Activation::Tanh]).unwrap();
        net.params_mut()[0] = a[(0, 0)];
        assert_eq!(net.input_jacobian(&[0.0]).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Tanh, Activation::Softplus] {
            let net = Mlp::new(&[4, 16, 16, 3], act, 1.0, &mut rng).unwrap();
            let z = [0.3, -0.7, 1.2, 0.05];
            let jac = net.input_jacobian(&z).unwrap();
            let h = 1e-5;
            for c in 0..4 {
                let mut zp = z;
                let mut zm = z;
                zp[c] += h;
                zm[c] -= h;
                let fp = net.forward(&zp).unwrap();
                let fm = net.forward(&zm).unwrap();
                for r in 0..3 {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    let rel = (jac[(r, c)] - fd).abs() / fd.abs().max(1e-3);
                    assert!(rel < 1e-5, "{} vs {}", jac[(r, c)], fd);
                }
            }
        }
    }
}
