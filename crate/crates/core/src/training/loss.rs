//! Training objectives and their parameter gradients.
//!
//! Batch-max terms are located by a plain `f64` pass; only the maximizing
//! samples are then replayed on the tape.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ccm::{condition_ratio, delta_u_sample, strong_terms, weak_contraction, CcmBundle, CcmMode, CcmPoint};
use crate::error::{Error, Result};
use crate::models::{ControlAffineModel, Sample};
use crate::nnet::tape::{self, Var};
use crate::num::mat::{dist_f64, lift_vec};
use crate::num::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DynLossParts {
    pub mse: f64,
    /// Largest batch slope `|e_i − e_j| / ‖z_i − z_j‖`.
    pub lipschitz: f64,
    pub total: f64,
}

fn residual_sq<T: Real>(g: &ControlAffineModel, p: &[T], s: &Sample) -> T {
    let x: Vec<T> = lift_vec(&s.x);
    let u: Vec<T> = lift_vec(&s.u);
    let pred = g.eval_with(p, &x, &u);
    let mut acc = T::zero();
    for (a, &b) in pred.iter().zip(&s.dx) {
        let r = *a - T::cst(b);
        acc += r * r;
    }
    acc
}

/// Index pair of the largest batch slope, skipping coincident pairs.
fn steepest_pair(batch: &[&Sample], errors: &[f64]) -> Option<(usize, usize, f64, f64)> {
    let zs: Vec<Vec<f64>> = batch.iter().map(|s| s.z()).collect();
    let mut best: Option<(usize, usize, f64, f64)> = None;
    for i in 0..batch.len() {
        for j in i + 1..batch.len() {
            let d = dist_f64(&zs[i], &zs[j]);
            if d == 0.0 {
                continue;
            }
            let slope = (errors[i] - errors[j]).abs() / d;
            if best.is_none_or(|b| slope > b.2) {
                best = Some((i, j, slope, d));
            }
        }
    }
    best
}

fn check_batch(batch: &[&Sample]) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::invalid("dynamics loss needs a batch of at least 2"));
    }
    Ok(())
}

/// `(1/N_b) Σ e_i² + α₁ max_{i≠j} |e_i − e_j| / ‖z_i − z_j‖`.
pub fn dyn_loss(g: &ControlAffineModel, batch: &[&Sample], alpha1: f64) -> Result<DynLossParts> {
    check_batch(batch)?;
    let p = g.params();
    let sq: Vec<f64> = batch.iter().map(|s| residual_sq(g, &p, s)).collect();
    let mse = sq.iter().sum::<f64>() / batch.len() as f64;
    let errors: Vec<f64> = sq.iter().map(|v| v.sqrt()).collect();
    let lipschitz = steepest_pair(batch, &errors).map_or(0.0, |b| b.2);
    Ok(DynLossParts {
        mse,
        lipschitz,
        total: mse + alpha1 * lipschitz,
    })
}

/// [`dyn_loss`] and its gradient with respect to the model parameters.
pub fn dyn_loss_grad(g: &ControlAffineModel, batch: &[&Sample], alpha1: f64) -> Result<(DynLossParts, Vec<f64>)> {
    check_batch(batch)?;
    tape::reset();
    let p = tape::leaves(&g.params());
    let sq: Vec<Var> = batch.iter().map(|s| residual_sq(g, &p, s)).collect();
    let mut sum = Var::constant(0.0);
    for &v in &sq {
        sum += v;
    }
    let mse = sum / Var::constant(batch.len() as f64);
    let errors: Vec<f64> = sq.iter().map(|v| v.value().sqrt()).collect();
    let mut total = mse;
    let mut lipschitz = 0.0;
    if let Some((i, j, slope, d)) = steepest_pair(batch, &errors) {
        lipschitz = slope;
        if alpha1 != 0.0 {
            // √(s + tiny) keeps the derivative finite at a zero residual.
            let tiny = Var::constant(1e-24);
            let diff = (sq[i] + tiny).sqrt() - (sq[j] + tiny).sqrt();
            total += Var::constant(alpha1 / d) * diff.abs();
        }
    }
    let grads = tape::gradients(total)?.wrt_slice(&p);
    Ok((
        DynLossParts {
            mse: mse.value(),
            lipschitz,
            total: total.value(),
        },
        grads,
    ))
}

/// Linear penalty below `margin`, log barrier above:
/// `−ln s` for `s > margin`, else `(margin − s)/margin − ln(margin)`.
pub fn logb<T: Real>(s: T, margin: f64) -> T {
    if s.val() > margin {
        -s.ln()
    } else {
        (T::cst(margin) - s) / T::cst(margin) - T::cst(margin.ln())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcmWeights {
    pub alpha2: f64,
    pub alpha3: f64,
    pub margin: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CcmLossParts {
    /// `max_i λ̄(C(point_i))`.
    pub nsd: f64,
    /// Batch max of the tube-size surrogate (before `α₂`).
    pub opt: f64,
    /// `‖θ₁‖` (weak mode).
    pub gain: f64,
    pub barrier: f64,
    pub total: f64,
}

/// `(λ̄(C), surrogate)` at one point. The surrogate is
/// `√(λ̄(M)/λ̲(M))·(1 + δ_u)` in strong mode and `√(λ̄(M)/λ̲(M))` in weak mode.
fn point_terms<T: Real>(bundle: &CcmBundle, g: &ControlAffineModel, p: &[T], point: &CcmPoint) -> (T, T) {
    let nm = bundle.metric_params();
    match point {
        CcmPoint::Strong { x } => {
            let terms = strong_terms(bundle, &p[..nm], g, x);
            let nsd = T::max_eig(&terms.c);
            let du = delta_u_sample(&terms, &g.b(x));
            let opt = condition_ratio(&terms.w) * (T::one() + du);
            (nsd, opt)
        }
        CcmPoint::Weak {
            x_tilde,
            x_star,
            u_star,
        } => {
            let c = weak_contraction(bundle, &p[..nm], &p[nm..], g, x_tilde, x_star, u_star);
            let nsd = T::max_eig(&c);
            let x: Vec<f64> = x_star.iter().zip(x_tilde).map(|(a, b)| a + b).collect();
            let w = bundle.metric.w_with(&p[..nm], &x);
            (nsd, condition_ratio(&w))
        }
    }
}

fn gain_norm<T: Real>(bundle: &CcmBundle, p: &[T]) -> T {
    let nm = bundle.metric_params();
    let n_u = bundle.controller.as_ref().map_or(0, |c| c.n_u());
    let mut acc = T::zero();
    for &v in &p[nm..nm + n_u] {
        acc += v * v;
    }
    if acc.val() == 0.0 {
        return acc;
    }
    acc.sqrt()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] || (v[best].is_nan() && !x.is_nan()) {
            best = i;
        }
    }
    best
}

fn batch_values(bundle: &CcmBundle, g: &ControlAffineModel, batch: &[CcmPoint]) -> (Vec<f64>, Vec<f64>) {
    let p = bundle.params();
    batch.par_iter().map(|pt| point_terms(bundle, g, &p, pt)).unzip()
}

fn check_points(bundle: &CcmBundle, batch: &[CcmPoint]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty CCM batch"));
    }
    let ok = batch.iter().all(|p| {
        matches!(
            (bundle.mode, p),
            (CcmMode::Strong, CcmPoint::Strong { .. }) | (CcmMode::Weak, CcmPoint::Weak { .. })
        )
    });
    if !ok {
        return Err(Error::invalid("batch points do not match the bundle mode"));
    }
    Ok(())
}

/// `logb(−max_i λ̄(C_i)) + α₂ max_i surrogate_i (+ α₃‖θ₁‖ in weak mode)`.
pub fn ccm_loss(
    bundle: &CcmBundle,
    g: &ControlAffineModel,
    batch: &[CcmPoint],
    w: &CcmWeights,
) -> Result<CcmLossParts> {
    check_points(bundle, batch)?;
    let (nsd, opt) = batch_values(bundle, g, batch);
    let nsd = nsd[argmax(&nsd)];
    let opt = opt[argmax(&opt)];
    let gain = bundle.gain_norm();
    let barrier = logb(-nsd, w.margin);
    let mut total = barrier + w.alpha2 * opt;
    if bundle.mode == CcmMode::Weak {
        total += w.alpha3 * gain;
    }
    Ok(CcmLossParts {
        nsd,
        opt,
        gain,
        barrier,
        total,
    })
}

/// [`ccm_loss`] and its gradient with respect to the bundle parameters.
pub fn ccm_loss_grad(
    bundle: &CcmBundle,
    g: &ControlAffineModel,
    batch: &[CcmPoint],
    w: &CcmWeights,
) -> Result<(CcmLossParts, Vec<f64>)> {
    check_points(bundle, batch)?;
    let (nsd_vals, opt_vals) = batch_values(bundle, g, batch);
    let (i_nsd, i_opt) = (argmax(&nsd_vals), argmax(&opt_vals));
    tape::reset();
    let p = tape::leaves(&bundle.params());
    let (nsd, opt_same) = point_terms(bundle, g, &p, &batch[i_nsd]);
    let opt = if i_opt == i_nsd {
        opt_same
    } else {
        point_terms(bundle, g, &p, &batch[i_opt]).1
    };
    let barrier = logb(-nsd, w.margin);
    let mut total = barrier + Var::constant(w.alpha2) * opt;
    let mut gain = 0.0;
    if bundle.mode == CcmMode::Weak {
        let gn = gain_norm(bundle, &p);
        gain = gn.value();
        total += Var::constant(w.alpha3) * gn;
    }
    let grads = tape::gradients(total)?.wrt_slice(&p);
    Ok((
        CcmLossParts {
            nsd: nsd.value(),
            opt: opt.value(),
            gain,
            barrier: barrier.value(),
            total: total.value(),
        },
        grads,
    ))
}
