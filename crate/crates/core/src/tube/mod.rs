//! Tracking tubes: the disturbance bound, the energy differential
//! inequality, and its propagation along a nominal trajectory.
//!
//! The energy inequality `Ė ≤ −2aE + 2√(λ̄E)·c(t)` is non-Lipschitz at
//! `E = 0`. With `v = √E` it becomes the linear ODE `v̇ = −a·v + √λ̄·c(t)`,
//! which is what gets integrated; `E = v²` is reported alongside.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certify::CertifiedConstants;
use crate::domain::TrustedDomain;
use crate::error::{Error, Result};
use crate::models::Dynamics;
use crate::num::OdeSolution;
use crate::training::CcmMode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackBound {
    /// `‖u_fb‖ ≤ δ_u·ε`.
    Strong { delta_u: f64 },
    /// `‖u_fb‖ ≤ ū_fb`.
    Weak { u_fb_bar: f64 },
}

/// How the model error along the nominal is bounded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorModel {
    /// `L(ε + ū_fb) + min_i(L‖z* − zᵢ‖ + eᵢ)` from the trusted domain.
    Data,
    /// A uniform disturbance bound with no tracking-error inflation.
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeParams {
    pub l_hg: f64,
    pub lam: f64,
    pub lam_max_m: f64,
    pub lam_min_m: f64,
    pub feedback: FeedbackBound,
    pub error_model: ErrorModel,
}

impl TubeParams {
    pub fn from_constants(c: &CertifiedConstants, error_model: ErrorModel) -> Result<Self> {
        let feedback = match c.mode {
            CcmMode::Strong => FeedbackBound::Strong {
                delta_u: c
                    .delta_u
                    .ok_or_else(|| Error::invalid("strong-mode constants lack δ_u"))?,
            },
            CcmMode::Weak => FeedbackBound::Weak {
                u_fb_bar: c
                    .u_fb_bar
                    .ok_or_else(|| Error::invalid("weak-mode constants lack ū_fb"))?,
            },
        };
        let p = TubeParams {
            l_hg: c.l_hg,
            lam: c.lam,
            lam_max_m: c.lam_max_m,
            lam_min_m: c.lam_min_m,
            feedback,
            error_model,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lam_min_m > 0.0 && self.lam_max_m >= self.lam_min_m) {
            return Err(Error::invalid("tube needs 0 < λ̲(M) ≤ λ̄(M)"));
        }
        if !(self.l_hg >= 0.0 && self.lam > 0.0) {
            return Err(Error::invalid("tube needs L_hg ≥ 0 and λ > 0"));
        }
        if self.effective_rate() <= 0.0 {
            log::warn!(
                "effective contraction rate {:.4e} is not positive; tubes will grow",
                self.effective_rate()
            );
        }
        Ok(())
    }

    /// Rate `a` of the linear `v`-equation.
    pub fn effective_rate(&self) -> f64 {
        match self.error_model {
            ErrorModel::Constant(_) => self.lam,
            ErrorModel::Data => {
                let ratio = (self.lam_max_m / self.lam_min_m).sqrt();
                match self.feedback {
                    FeedbackBound::Strong { delta_u } => self.lam - self.l_hg * ratio * (1.0 + delta_u),
                    FeedbackBound::Weak { .. } => self.lam - self.l_hg * ratio,
                }
            }
        }
    }

    /// `ε̄ = √(E/λ̲)`.
    pub fn eps_bar(&self, energy: f64) -> f64 {
        (energy.max(0.0) / self.lam_min_m).sqrt()
    }

    pub fn u_fb_bar(&self, eps_bar: f64) -> f64 {
        match self.feedback {
            FeedbackBound::Strong { delta_u } => delta_u * eps_bar,
            FeedbackBound::Weak { u_fb_bar } => u_fb_bar,
        }
    }

    /// The part of the forcing that does not scale with `√E`.
    fn forcing(&self, dom: Option<&TrustedDomain>, z: &[f64]) -> f64 {
        match self.error_model {
            ErrorModel::Constant(d) => d,
            ErrorModel::Data => {
                let dom = dom.expect("data error model needs a trusted domain");
                let data = dom.min_error_term(z, self.l_hg).0;
                match self.feedback {
                    FeedbackBound::Strong { .. } => data,
                    FeedbackBound::Weak { u_fb_bar } => data + self.l_hg * u_fb_bar,
                }
            }
        }
    }

    /// `v̇` for `v = √E`.
    pub fn v_rhs(&self, dom: Option<&TrustedDomain>, z: &[f64], v: f64) -> f64 {
        -self.effective_rate() * v + self.lam_max_m.sqrt() * self.forcing(dom, z)
    }
}

/// `L(ε + u_fb) + min_i(L‖z* − zᵢ‖ + eᵢ)`.
pub fn disturbance_bound(params: &TubeParams, dom: &TrustedDomain, z_nominal: &[f64], eps: f64, u_fb: f64) -> f64 {
    params.l_hg * (eps + u_fb) + dom.min_error_term(z_nominal, params.l_hg).0
}

/// Right-hand side of the energy inequality,
/// `−2(λ − L√(λ̄/λ̲))E + 2√(Eλ̄)(L(‖z* − z_{i*}‖ + ū_fb) + e_{i*})`, with
/// the strong-mode feedback `ū_fb = δ_u√(E/λ̲)` folded into the linear term.
pub fn energy_rhs(params: &TubeParams, dom: Option<&TrustedDomain>, z_nominal: &[f64], energy: f64) -> f64 {
    let e = energy.max(0.0);
    -2.0 * params.effective_rate() * e + 2.0 * (e * params.lam_max_m).sqrt() * params.forcing(dom, z_nominal)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingTube {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    pub eps_bar: Vec<f64>,
    pub u_fb_bar: Vec<f64>,
}

impl TrackingTube {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn push(&mut self, params: &TubeParams, t: f64, v: f64) {
        let energy = v * v;
        let eps = params.eps_bar(energy);
        self.times.push(t);
        self.energy.push(energy);
        self.eps_bar.push(eps);
        self.u_fb_bar.push(params.u_fb_bar(eps));
    }

    /// Appends `other`, dropping its first sample when it repeats our last time.
    pub fn extend(&mut self, other: &TrackingTube) {
        let skip = usize::from(!self.is_empty() && !other.is_empty() && other.times[0] == *self.times.last().unwrap());
        self.times.extend_from_slice(&other.times[skip..]);
        self.energy.extend_from_slice(&other.energy[skip..]);
        self.eps_bar.extend_from_slice(&other.eps_bar[skip..]);
        self.u_fb_bar.extend_from_slice(&other.u_fb_bar[skip..]);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "eps_bar", "E", "u_fb_bar"])?;
        for i in 0..self.len() {
            w.write_record(
                [self.times[i], self.eps_bar[i], self.energy[i], self.u_fb_bar[i]].map(|v| format!("{v:.17e}")),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tube step for a dwell of `duration`: `duration/20`, at least 1 ms,
/// capped by `max_dt`.
pub fn default_dt(duration: f64, max_dt: f64) -> f64 {
    (duration / 20.0).min(max_dt).max(1e-3)
}

/// Integrates the nominal `ẋ* = g(x*, u_c)` and the tube together over one
/// constant-control segment, so the tube sees the nominal at every RK4
/// stage. Returns the nominal states and the tube on the same grid.
#[allow(clippy::too_many_arguments)]
pub fn propagate_segment<G: Dynamics + ?Sized>(
    params: &TubeParams,
    dom: Option<&TrustedDomain>,
    g: &G,
    x0: &[f64],
    u_c: &[f64],
    t0: f64,
    duration: f64,
    e_start: f64,
    dt: f64,
) -> Result<(OdeSolution, TrackingTube)> {
    if !(dt > 0.0) || !(duration >= 0.0) {
        return Err(Error::invalid("segment needs dt > 0 and a non-negative duration"));
    }
    if !(e_start >= 0.0) {
        return Err(Error::invalid("initial energy must be non-negative"));
    }
    let n = x0.len();
    let z_of = |x: &[f64]| -> Vec<f64> {
        let mut z = x[..n].to_vec();
        z.extend_from_slice(u_c);
        z
    };
    let field = |s: &[f64]| -> Vec<f64> {
        let mut d = g.eval(&s[..n], u_c);
        d.push(params.v_rhs(dom, &z_of(s), s[n].max(0.0)));
        d
    };
    let mut state = x0.to_vec();
    state.push(e_start.sqrt());
    let mut nominal = OdeSolution {
        times: vec![t0],
        states: vec![x0.to_vec()],
    };
    let mut tube = TrackingTube::default();
    tube.push(params, t0, state[n]);
    let steps = (duration / dt - 1e-9).ceil().max(0.0) as usize;
    let mut t = t0;
    for k in 0..steps {
        let h = if k + 1 == steps { t0 + duration - t } else { dt };
        if h <= 0.0 {
            break;
        }
        let k1 = field(&state);
        let s2: Vec<f64> = state.iter().zip(&k1).map(|(s, d)| s + 0.5 * h * d).collect();
        let k2 = field(&s2);
        let s3: Vec<f64> = state.iter().zip(&k2).map(|(s, d)| s + 0.5 * h * d).collect();
        let k3 = field(&s3);
        let s4: Vec<f64> = state.iter().zip(&k3).map(|(s, d)| s + h * d).collect();
        let k4 = field(&s4);
        for i in 0..=n {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        state[n] = state[n].max(0.0);
        t = if k + 1 == steps { t0 + duration } else { t + h };
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::PropagationDiverged { time: t });
        }
        nominal.times.push(t);
        nominal.states.push(state[..n].to_vec());
        tube.push(params, t, state[n]);
    }
    Ok((nominal, tube))
}

/// Propagates through a piecewise-constant schedule of `(u, dwell)` pairs,
/// each segment with step `dt_of(dwell)`.
pub fn propagate<G: Dynamics + ?Sized>(
    params: &TubeParams,
    dom: Option<&TrustedDomain>,
    g: &G,
    x0: &[f64],
    schedule: &[(Vec<f64>, f64)],
    e_start: f64,
    dt_of: impl Fn(f64) -> f64,
) -> Result<(OdeSolution, TrackingTube)> {
    let mut nominal = OdeSolution {
        times: vec![0.0],
        states: vec![x0.to_vec()],
    };
    let mut tube = TrackingTube::default();
    tube.push(params, 0.0, e_start.max(0.0).sqrt());
    let mut x = x0.to_vec();
    let mut e = e_start;
    let mut t = 0.0;
    for (u, dwell) in schedule {
        let (seg, seg_tube) = propagate_segment(params, dom, g, &x, u, t, *dwell, e, dt_of(*dwell))?;
        nominal.times.extend_from_slice(&seg.times[1..]);
        nominal.states.extend_from_slice(&seg.states[1..]);
        tube.extend(&seg_tube);
        x = seg.last_state().to_vec();
        e = *seg_tube.energy.last().unwrap();
        t += dwell;
    }
    Ok((nominal, tube))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Still;
    impl Dynamics for Still {
        fn n_x(&self) -> usize {
            2
        }
        fn n_u(&self) -> usize {
            1
        }
        fn eval(&self, _x: &[f64], _u: &[f64]) -> Vec<f64> {
            vec![0.0, 0.0]
        }
    }

    fn params(l: f64, model: ErrorModel) -> TubeParams {
        TubeParams {
            l_hg: l,
            lam: 0.8,
            lam_max_m: 2.0,
            lam_min_m: 0.5,
            feedback: FeedbackBound::Weak { u_fb_bar: 0.0 },
            error_model: model,
        }
    }

    #[test]
    fn disturbance_arithmetic() {
        let dom = TrustedDomain::new(vec![vec![0.0, 0.0, 0.0]], vec![0.01], 1.0, 2).unwrap();
        let p = TubeParams {
            l_hg: 0.006,
            ..params(0.006, ErrorModel::Data)
        };
        let d = disturbance_bound(&p, &dom, &[0.0, 0.0, 0.0], 0.1, 0.05);
        assert!((d - 0.0109).abs() < 1e-12);
    }

    #[test]
    fn zero_error_equilibrium_and_decay() {
        let dom = TrustedDomain::new(vec![vec![0.0, 0.0, 0.0]], vec![0.0], 1.0, 2).unwrap();
        let p = params(0.0, ErrorModel::Data);
        assert_eq!(energy_rhs(&p, Some(&dom), &[0.0, 0.0, 0.0], 0.0), 0.0);
        assert!((energy_rhs(&p, Some(&dom), &[0.0, 0.0, 0.0], 0.3) + 2.0 * 0.8 * 0.3).abs() < 1e-15);
        let (_, tube) = propagate_segment(&p, Some(&dom), &Still, &[0.0, 0.0], &[0.0], 0.0, 0.0, 0.0, 0.01).unwrap();
        assert_eq!(tube.len(), 1);
    }

    #[test]
    fn sqrt_substitution_matches_direct_energy() {
        // Direct RK4 on Ė with a constant forcing, started away from 0.
        let p = params(0.0, ErrorModel::Constant(0.3));
        let (_, tube) = propagate_segment(&p, None, &Still, &[0.0, 0.0], &[0.0], 0.0, 2.0, 0.5, 1e-3).unwrap();
        let mut e = 0.5;
        let h = 1e-4;
        let rhs = |e: f64| energy_rhs(&p, None, &[0.0; 3], e);
        for _ in 0..20_000 {
            let k1 = rhs(e);
            let k2 = rhs(e + 0.5 * h * k1);
            let k3 = rhs(e + 0.5 * h * k2);
            let k4 = rhs(e + h * k3);
            e += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((tube.energy.last().unwrap() - e).abs() < 1e-8);
    }
}
