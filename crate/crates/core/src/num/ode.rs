//! Fixed-step classical Runge-Kutta integration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl OdeSolution {
    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("solution has at least the initial state")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// One classical RK4 step of size `h` from `(t, x)`.
pub fn rk4_step<F>(field: &mut F, t: f64, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    let n = x.len();
    let k1 = field(t, x);
    let tmp: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k1[i]).collect();
    let k2 = field(t + 0.5 * h, &tmp);
    let tmp: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k2[i]).collect();
    let k3 = field(t + 0.5 * h, &tmp);
    let tmp: Vec<f64> = (0..n).map(|i| x[i] + h * k3[i]).collect();
    let k4 = field(t + h, &tmp);
    (0..n)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Integrates `ẋ = field(t, x)` over `t_span` with step `dt`. The last step
/// is shortened so the final time is hit exactly.
pub fn rk4_integrate<F>(mut field: F, x0: &[f64], t_span: (f64, f64), dt: f64) -> Result<OdeSolution>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    let (t0, t1) = t_span;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("step size must be positive, got {dt}")));
    }
    if !(t1 >= t0) {
        return Err(Error::invalid(format!("invalid time span [{t0}, {t1}]")));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationDiverged { time: t0 });
    }
    let n_steps = (((t1 - t0) / dt) - 1e-9).ceil().max(0.0) as usize;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(t0);
    states.push(x0.to_vec());
    let mut t = t0;
    let mut x = x0.to_vec();
    for k in 0..n_steps {
        let t_next = if k + 1 == n_steps { t1 } else { t0 + (k + 1) as f64 * dt };
        let h = t_next - t;
        let mut failed = false;
        let mut guarded = |tt: f64, xx: &[f64]| {
            let v = field(tt, xx);
            if v.iter().any(|c| !c.is_finite()) {
                failed = true;
            }
            v
        };
        x = rk4_step(&mut guarded, t, &x, h);
        if failed || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged { time: t });
        }
        t = t_next;
        times.push(t);
        states.push(x.clone());
    }
    Ok(OdeSolution { times, states })
}
