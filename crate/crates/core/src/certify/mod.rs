//! Probabilistic estimates of every constant the tube and the planner
//! consume, each holding with a user-chosen probability `ρ`.

pub mod evt;

use std::collections::BTreeMap;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use evt::{
    batch_maxima, batch_maxima_with, extreme_estimate, ks_test, normal_quantile, upper_value, weibull_fit, EvtParams,
    ExtremeEstimate, WeibullFit,
};

use crate::domain::{uniform_in_ball, PointSampler, TrustedDomain};
use crate::error::{Error, Result};
use crate::models::{ControlAffineModel, Dynamics};
use crate::num::mat::dist_f64;
use crate::num::{spectral_bounds, Mat, SymMatrix};
use crate::training::ccm::{delta_u_sample, strong_terms};
use crate::training::{contraction_matrix, CcmBundle, CcmMode, CcmPoint};

/// Confidence level per estimated constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RhoSet {
    pub l_hg: f64,
    pub lam_max_m: f64,
    pub lam_min_m: f64,
    pub delta_u: f64,
    pub lam_ccm: f64,
}

impl RhoSet {
    pub fn uniform(rho: f64) -> Self {
        RhoSet {
            l_hg: rho,
            lam_max_m: rho,
            lam_min_m: rho,
            delta_u: rho,
            lam_ccm: rho,
        }
    }

    fn validate(&self) -> Result<()> {
        for r in [self.l_hg, self.lam_max_m, self.lam_min_m, self.delta_u, self.lam_ccm] {
            if !(r > 0.5 && r < 1.0) {
                return Err(Error::Config(format!("every rho must lie in (0.5, 1), got {r}")));
            }
        }
        Ok(())
    }
}

impl Default for RhoSet {
    fn default() -> Self {
        Self::uniform(0.975)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyParams {
    pub evt: EvtParams,
    pub rho: RhoSet,
    /// Candidate `ε_max` values for weak-mode verification; tried largest first.
    pub eps_grid: Vec<f64>,
}

impl Default for CertifyParams {
    fn default() -> Self {
        CertifyParams {
            evt: EvtParams::default(),
            rho: RhoSet::default(),
            eps_grid: default_eps_grid(1.0),
        }
    }
}

/// Ten logarithmically spaced values from `hi` down to `hi / 100`.
pub fn default_eps_grid(hi: f64) -> Vec<f64> {
    (0..10).map(|i| hi * 10f64.powf(-2.0 * i as f64 / 9.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifiedConstants {
    pub mode: CcmMode,
    /// Lipschitz constant of `h − g` (1/s per unit state-control distance).
    pub l_hg: f64,
    /// Trained contraction rate λ (1/s).
    pub lam: f64,
    pub lam_max_m: f64,
    pub lam_min_m: f64,
    /// Strong mode: `‖u_fb‖ ≤ δ_u ‖x − x*‖`.
    pub delta_u: Option<f64>,
    /// Weak mode: `‖θ₁‖`, exact.
    pub u_fb_bar: Option<f64>,
    pub lam_ccm: f64,
    /// Weak mode: largest certified deviation radius.
    pub eps_max: Option<f64>,
    pub rho_per_constant: BTreeMap<String, f64>,
    pub overall_probability: f64,
}

impl CertifiedConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.lam_min_m > 0.0) || !(self.lam_max_m >= self.lam_min_m) {
            return Err(Error::invalid("metric eigenvalue bounds must satisfy 0 < min ≤ max"));
        }
        if !(self.l_hg >= 0.0) {
            return Err(Error::invalid("L_hg must be non-negative"));
        }
        if !(self.lam_ccm < 0.0) {
            return Err(Error::VerificationFailed(format!(
                "λ_CCM = {} is not negative",
                self.lam_ccm
            )));
        }
        match self.mode {
            CcmMode::Strong if self.delta_u.is_none() => Err(Error::invalid("strong mode needs δ_u")),
            CcmMode::Weak if self.u_fb_bar.is_none() || self.eps_max.is_none() => {
                Err(Error::invalid("weak mode needs ū_fb and ε_max"))
            }
            _ => Ok(()),
        }
    }

    /// `λ − L√(λ̄/λ̲)(1 + δ_u)` in strong mode, `λ − L√(λ̄/λ̲)` in weak mode.
    pub fn effective_rate(&self) -> f64 {
        let ratio = (self.lam_max_m / self.lam_min_m).sqrt();
        self.lam - self.l_hg * ratio * (1.0 + self.delta_u.unwrap_or(0.0))
    }
}

/// Fit diagnostics for one constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantReport {
    pub name: String,
    pub value: f64,
    pub rho: f64,
    pub ks_statistic: Option<f64>,
    pub ks_p_value: Option<f64>,
    pub n_s: usize,
    pub n_b: usize,
    pub max_sample: f64,
}

impl ConstantReport {
    fn from_estimate(name: &str, value: f64, est: &ExtremeEstimate) -> Self {
        ConstantReport {
            name: name.into(),
            value,
            rho: est.rho,
            ks_statistic: est.fit.map(|f| f.ks_statistic),
            ks_p_value: est.fit.map(|f| f.ks_p_value),
            n_s: est.n_s,
            n_b: est.n_b,
            max_sample: est.max_sample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub constants: CertifiedConstants,
    pub diagnostics: Vec<ConstantReport>,
    /// Number of fresh true-dynamics evaluations spent on `L_hg`.
    pub true_dynamics_samples: usize,
}

fn model_error<H: Dynamics + ?Sized, G: Dynamics + ?Sized>(h: &H, g: &G, z: &[f64]) -> Vec<f64> {
    let (x, u) = z.split_at(h.n_x());
    let a = h.eval(x, u);
    let b = g.eval(x, u);
    a.iter().zip(&b).map(|(p, q)| p - q).collect()
}

/// Slopes of `h − g` between i.i.d. pairs drawn from `D`.
pub fn estimate_l_hg<H, G>(dom: &TrustedDomain, h: &H, g: &G, rho: f64, params: &EvtParams) -> Result<ExtremeEstimate>
where
    H: Dynamics + ?Sized,
    G: Dynamics + ?Sized,
{
    let sampler = dom.sampler();
    extreme_estimate(
        |rng: &mut ChaCha8Rng| {
            for _ in 0..1000 {
                let z1 = sampler.sample(rng)?;
                let z2 = sampler.sample(rng)?;
                let d = dist_f64(&z1, &z2);
                if d < 1e-9 {
                    continue;
                }
                let e1 = model_error(h, g, &z1);
                let e2 = model_error(h, g, &z2);
                return Ok(dist_f64(&e1, &e2) / d);
            }
            Err(Error::Sampler("could not draw two distinct points from D".into()))
        },
        rho,
        params,
    )
}

/// Upper estimate of `sup η(x)` over the state projection of `D`.
fn state_sup<E>(dom: &TrustedDomain, eta: E, rho: f64, params: &EvtParams) -> Result<ExtremeEstimate>
where
    E: Fn(&[f64]) -> f64 + Sync,
{
    let sampler = dom.state_sampler();
    extreme_estimate(|rng: &mut ChaCha8Rng| Ok(eta(&sampler.sample(rng)?)), rho, params)
}

/// Metric bounds and the feedback bound.
pub struct MetricConstants {
    pub lam_max_m: f64,
    pub lam_min_m: f64,
    pub delta_u: Option<f64>,
    pub u_fb_bar: Option<f64>,
    pub reports: Vec<ConstantReport>,
}

/// `λ̄_D(M)` from `sup 1/λ̲(W)` (capped by the exact `1/w̲`), `λ̲_D(M)` as
/// `1 / sup λ̄(W)`, and the feedback bound. In strong mode the per-state
/// ratio is scaled by `max(1, √λ̄_D(M))` so that `δ_u` bounds the feedback
/// per unit of Euclidean deviation.
pub fn estimate_metric_and_controller_constants(
    dom: &TrustedDomain,
    bundle: &CcmBundle,
    g: &ControlAffineModel,
    rho: &RhoSet,
    params: &EvtParams,
) -> Result<MetricConstants> {
    let mut reports = Vec::new();
    let metric = &bundle.metric;
    let max_m = state_sup(dom, |x| 1.0 / w_bounds(&metric.w(x)).0, rho.lam_max_m, params)?;
    let lam_max_m = max_m.value.min(1.0 / metric.floor());
    reports.push(ConstantReport::from_estimate("lam_max_m", lam_max_m, &max_m));

    let max_w = state_sup(dom, |x| w_bounds(&metric.w(x)).1, rho.lam_min_m, params)?;
    let lam_min_m = 1.0 / max_w.value;
    reports.push(ConstantReport::from_estimate("lam_min_m", lam_min_m, &max_w));

    let (delta_u, u_fb_bar) = match bundle.mode {
        CcmMode::Strong => {
            let p = bundle.metric.params().to_vec();
            let est = state_sup(
                dom,
                |x| {
                    let terms = strong_terms(bundle, &p, g, x);
                    delta_u_sample(&terms, &g.b(x))
                },
                rho.delta_u,
                params,
            )?;
            let du = est.value.max(0.0) * lam_max_m.sqrt().max(1.0);
            reports.push(ConstantReport::from_estimate("delta_u", du, &est));
            (Some(du), None)
        }
        CcmMode::Weak => (None, Some(bundle.gain_norm())),
    };
    Ok(MetricConstants {
        lam_max_m,
        lam_min_m,
        delta_u,
        u_fb_bar,
        reports,
    })
}

fn w_bounds(w: &Mat<f64>) -> (f64, f64) {
    let s = SymMatrix::from_nearly_symmetric(w).expect("metric output is symmetric");
    spectral_bounds(&s)
}

/// Verification of the contraction condition over `D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub lam_ccm: f64,
    pub eps_max: Option<f64>,
    pub report: ConstantReport,
}

/// Strong mode: `sup λ̄(C^s(x))` over `proj_x(D)`. Weak mode: for each `ε`
/// (largest first) `sup λ̄(C^w)` over `B_ε(0) × D`; the first `ε` that
/// certifies `λ_CCM < 0` is `ε_max`.
pub fn verify_ccm(
    dom: &TrustedDomain,
    bundle: &CcmBundle,
    g: &ControlAffineModel,
    rho: f64,
    params: &EvtParams,
    eps_grid: &[f64],
) -> Result<Verification> {
    bundle.validate(g)?;
    let lmax = |c: SymMatrix| spectral_bounds(&c).1;
    match bundle.mode {
        CcmMode::Strong => {
            let est = state_sup(
                dom,
                |x| {
                    lmax(
                        contraction_matrix(bundle, g, &CcmPoint::Strong { x: x.to_vec() }).expect("valid strong point"),
                    )
                },
                rho,
                params,
            )?;
            if est.value >= 0.0 {
                return Err(Error::VerificationFailed(format!(
                    "sup λ̄(C^s) estimated at {:.4e} ≥ 0 (largest sample {:.4e})",
                    est.value, est.max_sample
                )));
            }
            Ok(Verification {
                lam_ccm: est.value,
                eps_max: None,
                report: ConstantReport::from_estimate("lam_ccm", est.value, &est),
            })
        }
        CcmMode::Weak => {
            let mut grid = eps_grid.to_vec();
            grid.sort_by(|a, b| b.total_cmp(a));
            let n_x = dom.n_x();
            let sampler = dom.sampler();
            let mut worst = f64::NAN;
            for eps in grid.into_iter().filter(|e| *e > 0.0) {
                let est = extreme_estimate(
                    |rng: &mut ChaCha8Rng| {
                        let z = sampler.sample(rng)?;
                        let x_tilde = uniform_in_ball(rng as &mut dyn RngCore, &vec![0.0; n_x], eps);
                        let point = CcmPoint::Weak {
                            x_tilde,
                            x_star: z[..n_x].to_vec(),
                            u_star: z[n_x..].to_vec(),
                        };
                        Ok(lmax(contraction_matrix(bundle, g, &point)?))
                    },
                    rho,
                    params,
                )?;
                if est.value < 0.0 {
                    return Ok(Verification {
                        lam_ccm: est.value,
                        eps_max: Some(eps),
                        report: ConstantReport::from_estimate("lam_ccm", est.value, &est),
                    });
                }
                worst = est.value;
            }
            Err(Error::VerificationFailed(format!(
                "no ε in the grid certifies λ_CCM < 0 (smallest ε gave {worst:.4e})"
            )))
        }
    }
}

/// Every constant at once, with the overall probability the product of the
/// `ρ` of each estimated constant.
pub fn certify<H: Dynamics + ?Sized>(
    dom: &TrustedDomain,
    truth: &H,
    g: &ControlAffineModel,
    bundle: &CcmBundle,
    params: &CertifyParams,
) -> Result<CertificationReport> {
    params.rho.validate()?;
    bundle.validate(g)?;
    let mut evt = params.evt;
    let verification = verify_ccm(dom, bundle, g, params.rho.lam_ccm, &evt, &params.eps_grid)?;
    evt.seed = evt.seed.wrapping_add(1000);
    let l = estimate_l_hg(dom, truth, g, params.rho.l_hg, &evt)?;
    evt.seed = evt.seed.wrapping_add(1000);
    let mc = estimate_metric_and_controller_constants(dom, bundle, g, &params.rho, &evt)?;

    let mut rho_map = BTreeMap::new();
    rho_map.insert("l_hg".to_string(), params.rho.l_hg);
    rho_map.insert("lam_max_m".to_string(), params.rho.lam_max_m);
    rho_map.insert("lam_min_m".to_string(), params.rho.lam_min_m);
    rho_map.insert("lam_ccm".to_string(), params.rho.lam_ccm);
    if mc.delta_u.is_some() {
        rho_map.insert("delta_u".to_string(), params.rho.delta_u);
    }
    let overall = rho_map.values().product();

    let mut diagnostics = vec![
        verification.report.clone(),
        ConstantReport::from_estimate("l_hg", l.value, &l),
    ];
    diagnostics.extend(mc.reports);
    let constants = CertifiedConstants {
        mode: bundle.mode,
        l_hg: l.value.max(0.0),
        lam: bundle.lam,
        lam_max_m: mc.lam_max_m,
        lam_min_m: mc.lam_min_m,
        delta_u: mc.delta_u,
        u_fb_bar: mc.u_fb_bar,
        lam_ccm: verification.lam_ccm,
        eps_max: verification.eps_max,
        rho_per_constant: rho_map,
        overall_probability: overall,
    };
    if constants.effective_rate() <= 0.0 {
        log::warn!(
            "effective contraction rate {:.4e} is not positive",
            constants.effective_rate()
        );
    }
    Ok(CertificationReport {
        constants,
        diagnostics,
        true_dynamics_samples: 2 * l.n_s * l.n_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::PsdMetricNet;

    fn double_integrator() -> ControlAffineModel {
        let a = Mat::from_fn(4, 4, |i, j| if j == i + 2 { 1.0 } else { 0.0 });
        let b = Mat::from_fn(4, 2, |i, j| if i == j + 2 { 1.0 } else { 0.0 });
        ControlAffineModel::linear(&a, &b, true).unwrap()
    }

    fn lyapunov_bundle(lam: f64) -> CcmBundle {
        let w = Mat::from_fn(4, 4, |i, j| match (i / 2, j / 2, i % 2 == j % 2) {
            (0, 0, true) => 1.0,
            (1, 1, true) => 2.0,
            (_, _, true) => -1.0,
            _ => 0.0,
        });
        CcmBundle {
            mode: CcmMode::Strong,
            metric: PsdMetricNet::constant(&w, 0.01, &[0, 1]).unwrap(),
            controller: None,
            lam,
        }
    }

    fn small_domain() -> TrustedDomain {
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 / 40.0;
                vec![t, -t, 0.5 * t, 0.1, 0.0, 0.0]
            })
            .collect();
        TrustedDomain::new(pts, vec![0.0; 40], 0.3, 4).unwrap()
    }

    #[test]
    fn lyapunov_metric_certifies() {
        let g = double_integrator();
        let v = verify_ccm(
            &small_domain(),
            &lyapunov_bundle(0.5),
            &g,
            0.975,
            &EvtParams::default(),
            &[],
        )
        .unwrap();
        // C^s = (2λa − 2b) I = −1·I everywhere.
        assert!((v.lam_ccm + 1.0).abs() < 1e-9);
    }

    #[test]
    fn huge_rate_fails_verification() {
        let g = double_integrator();
        let r = verify_ccm(
            &small_domain(),
            &lyapunov_bundle(50.0),
            &g,
            0.975,
            &EvtParams::default(),
            &[],
        );
        assert!(matches!(r, Err(Error::VerificationFailed(_))));
    }

    #[test]
    fn constant_metric_bounds_exact() {
        let g = double_integrator();
        let bundle = lyapunov_bundle(0.5);
        let mc = estimate_metric_and_controller_constants(
            &small_domain(),
            &bundle,
            &g,
            &RhoSet::default(),
            &EvtParams::default(),
        )
        .unwrap();
        let (wmin, wmax) = w_bounds(&bundle.metric.w(&[0.0; 4]));
        assert!((mc.lam_max_m - 1.0 / wmin).abs() < 1e-9);
        assert!((mc.lam_min_m - 1.0 / wmax).abs() < 1e-9);
        assert!(mc.delta_u.unwrap() >= 0.0);
    }

    #[test]
    fn exact_model_has_tiny_lipschitz() {
        let g = double_integrator();
        let est = estimate_l_hg(&small_domain(), &g, &g, 0.975, &EvtParams::default()).unwrap();
        assert!(est.value <= 0.01);
    }
}
