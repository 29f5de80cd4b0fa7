//! Radius selection: start at the connectivity radius and grow while the
//! contraction condition still certifies, keeping the radius with the best
//! worst-case planning slack.

use serde::{Deserialize, Serialize};

use super::{dispersion, r_connect, TrustedDomain};
use crate::certify::CertifiedConstants;
use crate::error::{Error, Result};
use crate::training::CcmMode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadiusParams {
    /// Growth step as a fraction of `r_connect`.
    pub step_frac: f64,
    pub max_steps: usize,
    /// Horizon for the worst-case tube used in scoring (s).
    pub t_query: f64,
}

impl Default for RadiusParams {
    fn default() -> Self {
        RadiusParams {
            step_frac: 0.05,
            max_steps: 20,
            t_query: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusCandidate {
    pub r: f64,
    pub certified: bool,
    pub score: Option<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusDiagnostics {
    pub r_connect: f64,
    pub dispersion: f64,
    /// The selected radius is below `r_connect`.
    pub disconnected: bool,
    pub candidates: Vec<RadiusCandidate>,
    pub selected: f64,
}

/// Worst-case `ε̄(T) + ū_fb(T)` from zero initial energy with the nominal at
/// distance `disp` from the data and the largest training error.
pub fn worst_case_slack(c: &CertifiedConstants, disp: f64, max_err: f64, t: f64) -> f64 {
    let ratio = (c.lam_max_m / c.lam_min_m).sqrt();
    let (a, forcing) = match c.mode {
        CcmMode::Strong => (
            c.lam - c.l_hg * ratio * (1.0 + c.delta_u.unwrap_or(0.0)),
            c.l_hg * disp + max_err,
        ),
        CcmMode::Weak => {
            let ub = c.u_fb_bar.unwrap_or(0.0);
            (c.lam - c.l_hg * ratio, c.l_hg * (disp + ub) + max_err)
        }
    };
    let drive = c.lam_max_m.sqrt() * forcing;
    let v = if a.abs() < 1e-12 {
        drive * t
    } else {
        drive / a * (1.0 - (-a * t).exp())
    };
    let eps = v / c.lam_min_m.sqrt();
    let ufb = match c.mode {
        CcmMode::Strong => c.delta_u.unwrap_or(0.0) * eps,
        CcmMode::Weak => c.u_fb_bar.unwrap_or(0.0),
    };
    eps + ufb
}

/// `certify_at` certifies a candidate domain, returning
/// `Err(VerificationFailed)` when the contraction condition does not hold.
pub fn select_radius<F>(
    points: &[Vec<f64>],
    errors: &[f64],
    n_x: usize,
    params: &RadiusParams,
    certify_at: F,
) -> Result<(TrustedDomain, CertifiedConstants, RadiusDiagnostics)>
where
    F: Fn(&TrustedDomain) -> Result<CertifiedConstants>,
{
    let r0 = r_connect(points)?;
    let disp = dispersion(points)?;
    let max_err = errors.iter().cloned().fold(0.0, f64::max);
    if !(r0 > 0.0) {
        return Err(Error::DomainConstruction("training points coincide".into()));
    }
    let step = params.step_frac * r0;
    let mut candidates = Vec::new();
    let attempt =
        |r: f64, candidates: &mut Vec<RadiusCandidate>| -> Result<Option<(TrustedDomain, CertifiedConstants, f64)>> {
            let dom = TrustedDomain::new(points.to_vec(), errors.to_vec(), r, n_x)?;
            match certify_at(&dom) {
                Ok(c) => {
                    let score = r - worst_case_slack(&c, disp, max_err, params.t_query);
                    log::info!("radius {r:.4}: certified, λ_CCM {:.3e}, score {score:.4}", c.lam_ccm);
                    candidates.push(RadiusCandidate {
                        r,
                        certified: true,
                        score: Some(score),
                        note: None,
                    });
                    Ok(Some((dom, c, score)))
                }
                Err(e @ (Error::VerificationFailed(_) | Error::CertificationRefused { .. })) => {
                    log::info!("radius {r:.4}: not certified ({e})");
                    candidates.push(RadiusCandidate {
                        r,
                        certified: false,
                        score: None,
                        note: Some(e.to_string()),
                    });
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        };

    let mut best: Option<(TrustedDomain, CertifiedConstants, f64)> = None;
    let mut disconnected = false;
    match attempt(r0, &mut candidates)? {
        Some(found) => {
            best = Some(found);
            for k in 1..=params.max_steps {
                match attempt(r0 + k as f64 * step, &mut candidates)? {
                    Some(found) => {
                        if best.as_ref().is_none_or(|b| found.2 > b.2) {
                            best = Some(found);
                        }
                    }
                    None => break,
                }
            }
        }
        None => {
            for k in 1..20 {
                let r = r0 - k as f64 * step;
                if r <= 0.0 {
                    break;
                }
                if let Some(found) = attempt(r, &mut candidates)? {
                    log::warn!("contraction certifies only below r_connect (r = {r:.4}); the domain is disconnected");
                    disconnected = true;
                    best = Some(found);
                    break;
                }
            }
        }
    }
    let (dom, constants, _) = best
        .ok_or_else(|| Error::DomainConstruction("no candidate radius certifies the contraction condition".into()))?;
    let diag = RadiusDiagnostics {
        r_connect: r0,
        dispersion: disp,
        disconnected,
        candidates,
        selected: dom.radius(),
    };
    Ok((dom, constants, diag))
}
