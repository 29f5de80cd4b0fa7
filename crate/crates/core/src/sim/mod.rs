//! Closed-loop execution of plans on the true dynamics, and the summary
//! metrics over trials.
//!
//! Feedback is evaluated at every sample of the plan grid, and additionally
//! every `control_dt` inside longer intervals, and held constant in between.
//! The nominal at those instants comes from integrating the learned model,
//! never from interpolation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certify::CertifiedConstants;
use crate::controller::{feedback_control, Geodesic, GeodesicOpts};
use crate::domain::TrustedDomain;
use crate::error::{Error, Result};
use crate::models::{ControlAffineModel, Dynamics, SystemSpec};
use crate::num::mat::dist_f64;
use crate::num::rk4_step;
use crate::planner::{ErrorMode, Plan, Scenario};
use crate::training::CcmBundle;

/// Slack used when comparing the executed error with the tube.
pub const VIOLATION_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutParams {
    /// Longest zero-order-hold interval (s).
    pub control_dt: f64,
    /// RK4 steps of the true system per hold interval.
    pub substeps: usize,
    pub geodesic: GeodesicOpts,
    /// State norm beyond which a rollout counts as unstable.
    pub blowup: f64,
}

impl Default for RolloutParams {
    fn default() -> Self {
        RolloutParams {
            control_dt: 0.01,
            substeps: 4,
            geodesic: GeodesicOpts::default(),
            blowup: 1e6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    /// `‖x(t) − x*(t)‖`.
    pub eps: f64,
    pub eps_bar: f64,
    pub u_fb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub avg_tracking_error: f64,
    pub goal_error: f64,
    pub mean_eps_bar: f64,
    pub violation: bool,
    pub first_violation: Option<f64>,
    pub domain_exit: bool,
    pub first_domain_exit: Option<f64>,
    pub collision: bool,
    /// Time at which the state stopped being finite or blew up.
    pub unstable: Option<f64>,
    /// Feedback evaluations that raised a diagnostic.
    pub feedback_warnings: usize,
    pub trace: Vec<TraceRow>,
}

impl TrialReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "eps", "eps_bar", "u_fb"])?;
        for r in &self.trace {
            w.write_record([r.t, r.eps, r.eps_bar, r.u_fb].map(|v| format!("{v:.17e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// First time the trace leaves its tube.
pub fn first_violation(trace: &[TraceRow]) -> Option<f64> {
    trace.iter().find(|r| r.eps > r.eps_bar + VIOLATION_TOL).map(|r| r.t)
}

/// Executes `plan` on the true system from `x0`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    plan: &Plan,
    scenario: &Scenario,
    sys: &SystemSpec,
    bundle: &CcmBundle,
    g: &ControlAffineModel,
    constants: &CertifiedConstants,
    dom: &TrustedDomain,
    x0: &[f64],
    params: &RolloutParams,
) -> Result<TrialReport> {
    if !(params.control_dt > 0.0) || params.substeps == 0 {
        return Err(Error::invalid("rollout needs control_dt > 0 and at least one substep"));
    }
    if x0.len() != sys.n_x {
        return Err(Error::dim(sys.n_x, x0.len(), "rollout start"));
    }
    let times = &plan.nominal.times;
    let mut x = x0.to_vec();
    let mut warm: Option<Geodesic> = None;
    let mut trace = vec![TraceRow {
        t: 0.0,
        eps: dist_f64(&x, &plan.nominal.states[0]),
        eps_bar: plan.tube.eps_bar[0],
        u_fb: 0.0,
    }];
    let mut report = TrialReport {
        avg_tracking_error: 0.0,
        goal_error: 0.0,
        mean_eps_bar: plan.mean_eps_bar(),
        violation: false,
        first_violation: None,
        domain_exit: false,
        first_domain_exit: None,
        collision: false,
        unstable: None,
        feedback_warnings: 0,
        trace: vec![],
    };
    let collides = |x: &[f64]| {
        let p = sys.position(x);
        scenario.obstacles.iter().any(|o| dist_f64(&p, &o.center) < o.radius)
    };
    report.collision = collides(&x);
    'outer: for k in 0..times.len().saturating_sub(1) {
        let h = times[k + 1] - times[k];
        let u_star = &plan.controls[k];
        let holds = ((h / params.control_dt) - 1e-9).ceil().max(1.0) as usize;
        let hs = h / holds as f64;
        let mut x_star = plan.nominal.states[k].clone();
        let mut t = times[k];
        for j in 0..holds {
            let fb = match feedback_control(
                bundle,
                g,
                &x,
                &x_star,
                u_star,
                constants.delta_u,
                &params.geodesic,
                warm.as_ref(),
            ) {
                Ok(fb) => fb,
                Err(_) => {
                    report.unstable = Some(t);
                    break 'outer;
                }
            };
            if !fb.diagnostics.is_empty() {
                report.feedback_warnings += 1;
            }
            if fb.u.iter().any(|v| !v.is_finite()) {
                report.unstable = Some(t);
                break 'outer;
            }
            let z: Vec<f64> = x.iter().chain(&fb.u).copied().collect();
            if !report.domain_exit && !dom.contains(&z) {
                report.domain_exit = true;
                report.first_domain_exit = Some(t);
            }
            warm = fb.geodesic;
            let hsub = hs / params.substeps as f64;
            let mut field = |_t: f64, s: &[f64]| sys.eval(s, &fb.u);
            for i in 0..params.substeps {
                x = rk4_step(&mut field, t + i as f64 * hsub, &x, hsub);
            }
            if x.iter().any(|v| !v.is_finite()) || x.iter().any(|v| v.abs() > params.blowup) {
                report.unstable = Some(t + hs);
                break 'outer;
            }
            if j + 1 < holds {
                let mut nominal_field = |_t: f64, s: &[f64]| g.eval(s, u_star);
                x_star = rk4_step(&mut nominal_field, t, &x_star, hs);
            }
            t = if j + 1 == holds { times[k + 1] } else { t + hs };
            let u_fb = fb.u_fb_norm;
            if j + 1 == holds {
                trace.push(TraceRow {
                    t,
                    eps: dist_f64(&x, &plan.nominal.states[k + 1]),
                    eps_bar: plan.tube.eps_bar[k + 1],
                    u_fb,
                });
            }
        }
        if collides(&x) {
            report.collision = true;
        }
    }
    report.avg_tracking_error = trace.iter().map(|r| r.eps).sum::<f64>() / trace.len() as f64;
    report.goal_error = scenario.goal_distance(&x);
    if report.unstable.is_some() {
        report.goal_error = f64::INFINITY;
    }
    report.first_violation = first_violation(&trace);
    report.violation = report.first_violation.is_some();
    report.trace = trace;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrialOutcome {
    Executed(TrialReport),
    Infeasible,
}

/// Mean, population standard deviation, and worst case.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub worst: f64,
}

impl Stat {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat {
            mean,
            std: var.sqrt(),
            worst: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    /// `m ± s (w)`, or `n/a` when nothing was executed.
    pub fn describe(s: &Option<Stat>) -> String {
        s.as_ref().map_or_else(|| "n/a".to_string(), |s| s.to_string())
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3} ({:.3})", self.mean, self.std, self.worst)
    }
}

/// One row of the summary table. Error statistics cover the executed,
/// stable trials only and are absent when there are none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: ErrorMode,
    pub trials: usize,
    pub infeasible: usize,
    pub violations: usize,
    pub unstable: usize,
    pub domain_exits: usize,
    pub collisions: usize,
    pub avg_tracking_error: Option<Stat>,
    pub goal_error: Option<Stat>,
    pub mean_tube_radius: Option<Stat>,
}

pub fn evaluate(results: &[(ErrorMode, TrialOutcome)]) -> Vec<ModeSummary> {
    ErrorMode::ALL
        .into_iter()
        .filter(|m| results.iter().any(|(rm, _)| rm == m))
        .map(|mode| {
            let runs: Vec<&TrialOutcome> = results.iter().filter(|(m, _)| *m == mode).map(|(_, o)| o).collect();
            let executed: Vec<&TrialReport> = runs
                .iter()
                .filter_map(|o| match o {
                    TrialOutcome::Executed(r) => Some(r),
                    TrialOutcome::Infeasible => None,
                })
                .collect();
            let stable: Vec<&&TrialReport> = executed.iter().filter(|r| r.unstable.is_none()).collect();
            let col = |f: fn(&TrialReport) -> f64| stable.iter().map(|r| f(r)).collect::<Vec<f64>>();
            ModeSummary {
                mode,
                trials: runs.len(),
                infeasible: runs.len() - executed.len(),
                violations: executed.iter().filter(|r| r.violation).count(),
                unstable: executed.iter().filter(|r| r.unstable.is_some()).count(),
                domain_exits: executed.iter().filter(|r| r.domain_exit).count(),
                collisions: executed.iter().filter(|r| r.collision).count(),
                avg_tracking_error: Stat::of(&col(|r| r.avg_tracking_error)),
                goal_error: Stat::of(&col(|r| r.goal_error)),
                mean_tube_radius: Stat::of(&col(|r| r.mean_eps_bar)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(trace: Vec<TraceRow>) -> TrialReport {
        TrialReport {
            avg_tracking_error: 0.0,
            goal_error: 0.0,
            mean_eps_bar: 0.0,
            violation: first_violation(&trace).is_some(),
            first_violation: first_violation(&trace),
            domain_exit: false,
            first_domain_exit: None,
            collision: false,
            unstable: None,
            feedback_warnings: 0,
            trace,
        }
    }

    #[test]
    fn perfect_trial_is_all_zero() {
        let r = report(vec![TraceRow {
            t: 0.0,
            eps: 0.0,
            eps_bar: 0.0,
            u_fb: 0.0,
        }]);
        let rows = evaluate(&[(ErrorMode::Lmtcd, TrialOutcome::Executed(r))]);
        assert_eq!(rows.len(), 1);
        let row = &rows[0];
        assert_eq!((row.violations, row.infeasible, row.unstable), (0, 0, 0));
        assert_eq!(row.avg_tracking_error, Some(Stat::default()));
        assert_eq!(row.goal_error, Some(Stat::default()));
        let none = evaluate(&[(ErrorMode::B2MaxInD, TrialOutcome::Infeasible)]);
        assert_eq!(none[0].avg_tracking_error, None);
        assert_eq!(Stat::describe(&none[0].goal_error), "n/a");
    }

    #[test]
    fn single_crossing_counts_once() {
        let trace: Vec<TraceRow> = (0..10)
            .map(|i| TraceRow {
                t: i as f64 * 0.1,
                eps: if i == 4 { 0.3 } else { 0.1 },
                eps_bar: 0.2,
                u_fb: 0.0,
            })
            .collect();
        let r = report(trace);
        assert_eq!(r.first_violation, Some(0.4));
        let rows = evaluate(&[
            (ErrorMode::B3MaxFree, TrialOutcome::Executed(r)),
            (ErrorMode::B3MaxFree, TrialOutcome::Infeasible),
        ]);
        assert_eq!(rows[0].violations, 1);
        assert_eq!(rows[0].infeasible, 1);
        assert_eq!(rows[0].trials, 2);
    }

    #[test]
    fn stat_population_std() {
        let s = Stat::of(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.worst), (2.0, 1.0, 3.0));
    }
}
