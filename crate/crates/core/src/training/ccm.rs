//! Metric/controller bundles and their contraction matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ControlAffineModel;
use crate::nnet::{PsdMetricNet, TanhController};
use crate::num::mat::lift_vec;
use crate::num::{Mat, Real, SymMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CcmMode {
    /// Metric-only conditions; needs the sparse `B = [0; B_θ]` structure.
    Strong,
    /// Joint metric and learned tanh controller.
    Weak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcmBundle {
    pub mode: CcmMode,
    pub metric: PsdMetricNet,
    pub controller: Option<TanhController>,
    /// Target contraction rate (1/s).
    pub lam: f64,
}

/// Where a contraction matrix is evaluated.
#[derive(Clone, Debug, PartialEq)]
pub enum CcmPoint {
    Strong {
        x: Vec<f64>,
    },
    Weak {
        x_tilde: Vec<f64>,
        x_star: Vec<f64>,
        u_star: Vec<f64>,
    },
}

impl CcmBundle {
    pub fn validate(&self, g: &ControlAffineModel) -> Result<()> {
        if !(self.lam > 0.0) {
            return Err(Error::Config(format!(
                "contraction rate must be positive, got {}",
                self.lam
            )));
        }
        let n_x = self.metric.dim();
        match self.mode {
            CcmMode::Strong => {
                if !g.sparse_b() {
                    return Err(Error::Config("strong mode requires a sparse-B model".into()));
                }
                let n_u = crate::models::Dynamics::n_u(g);
                let expect: Vec<usize> = (0..n_x - n_u).collect();
                if self.metric.input_mask() != expect.as_slice() {
                    return Err(Error::Config(format!(
                        "strong mode metric must depend only on states {expect:?}, mask is {:?}",
                        self.metric.input_mask()
                    )));
                }
                if self.controller.is_some() {
                    return Err(Error::Config("strong mode bundles carry no learned controller".into()));
                }
            }
            CcmMode::Weak => {
                if self.controller.is_none() {
                    return Err(Error::Config("weak mode requires a learned controller".into()));
                }
            }
        }
        Ok(())
    }

    pub fn metric_params(&self) -> usize {
        self.metric.n_params()
    }

    /// Layout: metric parameters then controller parameters.
    pub fn n_params(&self) -> usize {
        self.metric.n_params() + self.controller.as_ref().map_or(0, |c| c.n_params())
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.metric.params().to_vec();
        if let Some(c) = &self.controller {
            p.extend(c.params());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::dim(self.n_params(), p.len(), "bundle parameters"));
        }
        let nm = self.metric.n_params();
        self.metric.set_params(&p[..nm])?;
        if let Some(c) = &mut self.controller {
            c.set_params(&p[nm..])?;
        }
        Ok(())
    }

    /// `‖θ₁‖` in weak mode, 0 otherwise.
    pub fn gain_norm(&self) -> f64 {
        self.controller.as_ref().map_or(0.0, |c| c.gain_norm())
    }
}

/// Pieces of the strong-mode condition at one state.
pub struct StrongTerms<T> {
    pub w: Mat<T>,
    /// `F = −∂_f W + hat(∂f/∂x · W) + 2λW`.
    pub f: Mat<T>,
    /// `C^s = B⊥ᵀ F B⊥`, the top-left `(n_x − n_u)` block of `F`.
    pub c: Mat<T>,
}

pub fn strong_terms<T: Real>(bundle: &CcmBundle, p_metric: &[T], g: &ControlAffineModel, x: &[f64]) -> StrongTerms<T> {
    let n = x.len();
    let n_u = crate::models::Dynamics::n_u(g);
    let (w, dw) = bundle.metric.w_and_grad_with(p_metric, x);
    let fx = g.f(x);
    let dfdx: Mat<T> = Mat::lift(&g.df_dx(x));
    let mut f = dfdx.matmul(&w).hat();
    f.add_assign_scaled(&w, T::cst(2.0 * bundle.lam));
    for (i, dwi) in dw.iter().enumerate() {
        if fx[i] != 0.0 {
            f.add_assign_scaled(dwi, T::cst(-fx[i]));
        }
    }
    let p = n - n_u;
    let c = f.block(0, 0, p, p);
    StrongTerms { w, f, c }
}

/// `C^w = Ṁ + hat(M(A + BK)) + 2λM` at `x = x* + x̃` under the learned
/// controller, with `Ṁ` taken along the closed-loop learned dynamics.
pub fn weak_contraction<T: Real>(
    bundle: &CcmBundle,
    p_metric: &[T],
    p_ctrl: &[T],
    g: &ControlAffineModel,
    x_tilde: &[f64],
    x_star: &[f64],
    u_star: &[f64],
) -> Mat<T> {
    let ctrl = bundle.controller.as_ref().expect("weak mode controller");
    let x: Vec<f64> = x_star.iter().zip(x_tilde).map(|(a, b)| a + b).collect();
    let (u, k) = ctrl.u_and_gain_with(p_ctrl, x_tilde, x_star, u_star);
    let (w, dw) = bundle.metric.w_and_grad_with(p_metric, &x);
    let m = w.inverse().expect("W is positive definite by construction");

    let b64 = g.b(&x);
    let b: Mat<T> = Mat::lift(&b64);
    let mut a: Mat<T> = Mat::lift(&g.df_dx(&x));
    for (j, dbj) in g.db_dx(&x).iter().enumerate() {
        a.add_assign_scaled(&Mat::lift(dbj), u[j]);
    }
    let fx: Vec<T> = lift_vec(&g.f(&x));
    let bu = b.mul_vec(&u);
    let xdot: Vec<T> = fx.iter().zip(&bu).map(|(&p, &q)| p + q).collect();

    let mut c = m.matmul(&a.add(&b.matmul(&k))).hat();
    c.add_assign_scaled(&m, T::cst(2.0 * bundle.lam));
    for &i in bundle.metric.input_mask() {
        let dm = m.matmul(&dw[i]).matmul(&m);
        c.add_assign_scaled(&dm, -xdot[i]);
    }
    c
}

/// Contraction matrix `C^s(x)` or `C^w(x̃, x*, u*)` with the bundle's own
/// parameters.
pub fn contraction_matrix(bundle: &CcmBundle, g: &ControlAffineModel, point: &CcmPoint) -> Result<SymMatrix> {
    let p = bundle.params();
    let nm = bundle.metric_params();
    let c = match (bundle.mode, point) {
        (CcmMode::Strong, CcmPoint::Strong { x }) => {
            if !g.sparse_b() {
                return Err(Error::Config("strong mode requires a sparse-B model".into()));
            }
            strong_terms(bundle, &p[..nm], g, x).c
        }
        (
            CcmMode::Weak,
            CcmPoint::Weak {
                x_tilde,
                x_star,
                u_star,
            },
        ) => weak_contraction(bundle, &p[..nm], &p[nm..], g, x_tilde, x_star, u_star),
        _ => return Err(Error::invalid("evaluation point does not match the bundle mode")),
    };
    SymMatrix::from_nearly_symmetric(&c)
}

/// `λ̄(R⁻ᵀ F R⁻¹) / (2 σ̲(Bᵀ R⁻¹))` with `W = RᵀR`. Uses
/// `σ̲(Bᵀ R⁻¹)² = λ̲(Bᵀ W⁻¹ B)`.
pub fn delta_u_sample<T: Real>(terms: &StrongTerms<T>, b: &Mat<f64>) -> T {
    let r = terms
        .w
        .cholesky_upper()
        .expect("W is positive definite by construction");
    let rinv = r.upper_triangular_inverse().expect("nonsingular Cholesky factor");
    let scaled = rinv.transpose().matmul(&terms.f).matmul(&rinv);
    let bt_rinv = Mat::<T>::lift(&b.transpose()).matmul(&rinv);
    let gram = bt_rinv.matmul(&bt_rinv.transpose());
    T::max_eig(&scaled) / (T::cst(2.0) * T::min_eig(&gram).sqrt())
}

/// `√(λ̄(W)/λ̲(W))`, which equals `√(λ̄(M)/λ̲(M))`.
pub fn condition_ratio<T: Real>(w: &Mat<T>) -> T {
    (T::max_eig(w) / T::min_eig(w)).sqrt()
}
