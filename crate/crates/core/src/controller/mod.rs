//! Riemannian energy by discrete geodesics, and the tracking feedback used
//! at execution time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ControlAffineModel, Dynamics};
use crate::nnet::PsdMetricNet;
use crate::num::mat::{dist_f64, norm_f64};
use crate::num::Mat;
use crate::training::{CcmBundle, CcmMode};

/// A metric `M(x)` with its state derivatives `∂M/∂xᵢ`.
pub trait MetricField: Sync {
    fn dim(&self) -> usize;
    fn m_and_grad(&self, x: &[f64]) -> (Mat<f64>, Vec<Mat<f64>>);
}

impl MetricField for PsdMetricNet {
    fn dim(&self) -> usize {
        PsdMetricNet::dim(self)
    }

    /// `M = W⁻¹`, `∂M/∂xᵢ = −M (∂W/∂xᵢ) M`.
    fn m_and_grad(&self, x: &[f64]) -> (Mat<f64>, Vec<Mat<f64>>) {
        let (w, dw) = self.w_and_grad(x);
        let m = w.inverse().expect("W is positive definite by construction");
        let dm = dw.iter().map(|d| m.matmul(d).matmul(&m).scale(-1.0)).collect();
        (m, dm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeodesicOpts {
    /// Number of segments `K`.
    pub segments: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GeodesicOpts {
    fn default() -> Self {
        GeodesicOpts {
            segments: 8,
            max_iter: 50,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geodesic {
    /// `K + 1` points from `p` to `q`.
    pub points: Vec<Vec<f64>>,
    pub energy: f64,
    /// Gradient of the discrete energy with respect to `p` and `q`.
    pub grad_start: Vec<f64>,
    pub grad_end: Vec<f64>,
    pub grad_norm: f64,
    pub converged: bool,
}

/// `Σ_k K Δc_kᵀ M(mid_k) Δc_k` and its gradient with respect to every point.
pub fn discrete_energy<Mf: MetricField + ?Sized>(metric: &Mf, pts: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>, Vec<Mat<f64>>) {
    let k = (pts.len() - 1) as f64;
    let n = pts[0].len();
    let mut energy = 0.0;
    let mut grad = vec![vec![0.0; n]; pts.len()];
    let mut mids = Vec::with_capacity(pts.len() - 1);
    for s in 0..pts.len() - 1 {
        let d: Vec<f64> = pts[s + 1].iter().zip(&pts[s]).map(|(a, b)| a - b).collect();
        let mid: Vec<f64> = pts[s + 1].iter().zip(&pts[s]).map(|(a, b)| 0.5 * (a + b)).collect();
        let (m, dm) = metric.m_and_grad(&mid);
        let md = m.mul_vec(&d);
        energy += k * d.iter().zip(&md).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            let q = dm[i].mul_vec(&d).iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
            grad[s + 1][i] += 2.0 * k * md[i] + 0.5 * k * q;
            grad[s][i] += -2.0 * k * md[i] + 0.5 * k * q;
        }
        mids.push(m);
    }
    (energy, grad, mids)
}

/// Minimizes the discrete energy over the interior points starting from the
/// straight line between `p` and `q`.
pub fn riemann_energy<Mf: MetricField + ?Sized>(
    metric: &Mf,
    p: &[f64],
    q: &[f64],
    opts: &GeodesicOpts,
) -> Result<Geodesic> {
    if opts.segments < 2 {
        return Err(Error::invalid("a discrete geodesic needs at least 2 segments"));
    }
    let k = opts.segments;
    let mut init: Vec<Vec<f64>> = (0..=k)
        .map(|s| {
            let t = s as f64 / k as f64;
            p.iter().zip(q).map(|(a, b)| a + t * (b - a)).collect()
        })
        .collect();
    init[k] = q.to_vec();
    riemann_energy_from(metric, init, opts)
}

/// As [`riemann_energy`] but from a given initial curve (endpoints fixed).
pub fn riemann_energy_from<Mf: MetricField + ?Sized>(
    metric: &Mf,
    mut pts: Vec<Vec<f64>>,
    opts: &GeodesicOpts,
) -> Result<Geodesic> {
    let n = pts[0].len();
    let k = pts.len() - 1;
    if pts.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite geodesic endpoint"));
    }
    if n != metric.dim() {
        return Err(Error::dim(metric.dim(), n, "geodesic point"));
    }
    let (mut energy, mut grad, mut mids) = discrete_energy(metric, &pts);
    let interior_norm = |g: &[Vec<f64>]| g[1..k].iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let mut gnorm = interior_norm(&grad);
    let mut iter = 0;
    while gnorm > opts.tol && iter < opts.max_iter {
        iter += 1;
        // Gauss-Newton step with the metric frozen at the segment midpoints:
        // the Hessian of Σ K Δᵀ M Δ is block tridiagonal.
        let dim = (k - 1) * n;
        let mut h = Mat::zeros(dim, dim);
        for s in 1..k {
            let a = &mids[s - 1];
            let b = &mids[s];
            for i in 0..n {
                for j in 0..n {
                    h[((s - 1) * n + i, (s - 1) * n + j)] = 2.0 * k as f64 * (a[(i, j)] + b[(i, j)]);
                    if s + 1 < k {
                        h[((s - 1) * n + i, s * n + j)] = -2.0 * k as f64 * b[(i, j)];
                        h[(s * n + i, (s - 1) * n + j)] = -2.0 * k as f64 * b[(j, i)];
                    }
                }
            }
        }
        let rhs: Vec<f64> = grad[1..k].iter().flatten().cloned().collect();
        let step = match h.inverse() {
            Ok(hinv) => hinv.mul_vec(&rhs),
            Err(_) => rhs.clone(),
        };
        let slope: f64 = step.iter().zip(&rhs).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = pts.clone();
            for s in 1..k {
                for i in 0..n {
                    trial[s][i] -= t * step[(s - 1) * n + i];
                }
            }
            let (e2, g2, m2) = discrete_energy(metric, &trial);
            if e2.is_finite() && e2 <= energy - 1e-4 * t * slope.max(0.0) {
                pts = trial;
                energy = e2;
                grad = g2;
                mids = m2;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        gnorm = interior_norm(&grad);
        if !accepted {
            break;
        }
    }
    let converged = gnorm <= opts.tol || gnorm <= 1e-9 * (1.0 + energy);
    Ok(Geodesic {
        grad_start: grad[0].clone(),
        grad_end: grad[k].clone(),
        points: pts,
        energy,
        grad_norm: gnorm,
        converged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackDiagnostic {
    GeodesicNotConverged,
    /// The energy-decrease constraint has no effective input direction.
    Infeasible,
    /// `‖u_fb‖` exceeded `δ_u‖x − x*‖`.
    BoundExceeded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Feedback {
    pub u: Vec<f64>,
    pub u_fb_norm: f64,
    /// Riemannian energy between `x*` and `x` (strong mode), else NaN.
    pub energy: f64,
    pub diagnostics: Vec<FeedbackDiagnostic>,
    /// Geodesic used, for warm-starting the next call.
    pub geodesic: Option<Geodesic>,
}

/// Tracking control toward `(x*, u*)`. Strong mode: the smallest `u_fb`
/// with `Ė ≤ −2λE` along the learned dynamics, from the first variation of
/// the energy at the geodesic endpoints. Weak mode: the learned controller.
#[allow(clippy::too_many_arguments)]
pub fn feedback_control(
    bundle: &CcmBundle,
    g: &ControlAffineModel,
    x: &[f64],
    x_star: &[f64],
    u_star: &[f64],
    delta_u: Option<f64>,
    opts: &GeodesicOpts,
    warm: Option<&Geodesic>,
) -> Result<Feedback> {
    match bundle.mode {
        CcmMode::Weak => {
            let ctrl = bundle
                .controller
                .as_ref()
                .ok_or_else(|| Error::Config("weak mode needs a controller".into()))?;
            let xt: Vec<f64> = x.iter().zip(x_star).map(|(a, b)| a - b).collect();
            let u = ctrl.eval(&xt, x_star, u_star)?;
            let fb: Vec<f64> = u.iter().zip(u_star).map(|(a, b)| a - b).collect();
            Ok(Feedback {
                u_fb_norm: norm_f64(&fb),
                u,
                energy: f64::NAN,
                diagnostics: vec![],
                geodesic: None,
            })
        }
        CcmMode::Strong => {
            if dist_f64(x, x_star) == 0.0 {
                return Ok(Feedback {
                    u: u_star.to_vec(),
                    u_fb_norm: 0.0,
                    energy: 0.0,
                    diagnostics: vec![],
                    geodesic: None,
                });
            }
            let geo = match warm.filter(|w| w.points.len() == opts.segments + 1) {
                Some(w) => {
                    let k = opts.segments;
                    let (p0, q0) = (&w.points[0], &w.points[k]);
                    let mut init: Vec<Vec<f64>> = (0..=k)
                        .map(|s| {
                            let t = s as f64 / k as f64;
                            (0..x.len())
                                .map(|i| w.points[s][i] + (1.0 - t) * (x_star[i] - p0[i]) + t * (x[i] - q0[i]))
                                .collect()
                        })
                        .collect();
                    init[0] = x_star.to_vec();
                    init[k] = x.to_vec();
                    riemann_energy_from(&bundle.metric, init, opts)?
                }
                None => riemann_energy(&bundle.metric, x_star, x, opts)?,
            };
            let mut diagnostics = vec![];
            if !geo.converged {
                diagnostics.push(FeedbackDiagnostic::GeodesicNotConverged);
            }
            let b = g.b(x);
            let a: Vec<f64> = (0..b.cols())
                .map(|j| (0..b.rows()).map(|i| geo.grad_end[i] * b[(i, j)]).sum())
                .collect();
            let dot = |v: &[f64], w: &[f64]| v.iter().zip(w).map(|(p, q)| p * q).sum::<f64>();
            let rhs = -2.0 * bundle.lam * geo.energy
                - dot(&geo.grad_end, &g.eval(x, u_star))
                - dot(&geo.grad_start, &g.eval(x_star, u_star));
            let a2 = dot(&a, &a);
            let mut fb = vec![0.0; u_star.len()];
            if rhs < 0.0 {
                if a2 > 1e-18 {
                    fb = a.iter().map(|v| rhs * v / a2).collect();
                } else {
                    diagnostics.push(FeedbackDiagnostic::Infeasible);
                }
            }
            let fb_norm = norm_f64(&fb);
            if let Some(du) = delta_u {
                if fb_norm > du * dist_f64(x, x_star) * (1.0 + 1e-9) {
                    diagnostics.push(FeedbackDiagnostic::BoundExceeded);
                }
            }
            Ok(Feedback {
                u: u_star.iter().zip(&fb).map(|(a, b)| a + b).collect(),
                u_fb_norm: fb_norm,
                energy: geo.energy,
                diagnostics,
                geodesic: Some(geo),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Const(Mat<f64>);
    impl MetricField for Const {
        fn dim(&self) -> usize {
            self.0.rows()
        }
        fn m_and_grad(&self, _x: &[f64]) -> (Mat<f64>, Vec<Mat<f64>>) {
            (
                self.0.clone(),
                vec![Mat::zeros(self.0.rows(), self.0.rows()); self.0.rows()],
            )
        }
    }

    struct Warped;
    impl MetricField for Warped {
        fn dim(&self) -> usize {
            2
        }
        fn m_and_grad(&self, x: &[f64]) -> (Mat<f64>, Vec<Mat<f64>>) {
            let m = Mat::diag(&[1.0, 1.0 + x[0] * x[0]]);
            let d0 = Mat::diag(&[0.0, 2.0 * x[0]]);
            (m, vec![d0, Mat::zeros(2, 2)])
        }
    }

    #[test]
    fn constant_metric_straight_line() {
        let m = Mat::from_vec(2, 2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let (p, q) = ([0.1, -0.3], [1.0, 0.4]);
        let geo = riemann_energy(&Const(m.clone()), &p, &q, &GeodesicOpts::default()).unwrap();
        let d = [q[0] - p[0], q[1] - p[1]];
        let exact: f64 = (0..2)
            .map(|i| (0..2).map(|j| d[i] * m[(i, j)] * d[j]).sum::<f64>())
            .sum();
        assert!((geo.energy - exact).abs() < 1e-12);
        let back = riemann_energy(&Const(m), &q, &p, &GeodesicOpts::default()).unwrap();
        assert!((back.energy - geo.energy).abs() < 1e-9);
        let same = riemann_energy(&Const(Mat::identity(2)), &p, &p, &GeodesicOpts::default()).unwrap();
        assert_eq!(same.energy, 0.0);
    }

    #[test]
    fn warped_metric_bends_toward_low_cost() {
        let (p, q) = ([1.0, 0.0], [1.0, 1.0]);
        let geo = riemann_energy(&Warped, &p, &q, &GeodesicOpts::default()).unwrap();
        // The straight line costs 2; bending toward x₀ = 0 is cheaper.
        assert!(geo.energy < 2.0 - 1e-3);
        assert!(geo.converged, "grad norm {}", geo.grad_norm);
        assert!(geo.points[4][0] < 1.0);
    }
}
