//! Benchmark systems with known dynamics `h(x, u)`.

use serde::{Deserialize, Serialize};

use super::Dynamics;
use crate::error::{Error, Result};
use crate::num::mat::dot;

pub const GRAVITY: f64 = 9.81;
pub const QUAD_MASS: f64 = 0.486;
pub const QUAD_ARM: f64 = 0.25;
pub const QUAD_INERTIA: f64 = 0.125;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    /// `[p_x, p_y, θ, v]`, controls `[ω, a]`.
    Car,
    /// `[p_x, p_z, φ, v_x, v_z, φ̇]`, controls `[u₁, u₂]`.
    Quadrotor,
    /// Double integrator `[p; v]` with `p, v ∈ R²`, controls `a ∈ R²`.
    Linear,
}

impl SystemKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "car" => Ok(SystemKind::Car),
            "quadrotor" => Ok(SystemKind::Quadrotor),
            "linear" => Ok(SystemKind::Linear),
            other => Err(Error::Config(format!("unknown system '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Car => "car",
            SystemKind::Quadrotor => "quadrotor",
            SystemKind::Linear => "linear",
        }
    }
}

/// Smooth additive error on the state derivative used to turn the linear
/// benchmark into a system whose model error is known exactly:
///
/// `d(z) = [0, 0, offset + (L/√2) sin(kᵀz), (L/√2) cos(mᵀz)]`
///
/// with `z = (x, u)` and unit vectors `k`, `m`. Its Jacobian has Frobenius
/// norm at most `L`, so `d` is `L`-Lipschitz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectedError {
    pub lipschitz: f64,
    pub offset: f64,
    pub k: Vec<f64>,
    pub m: Vec<f64>,
}

impl InjectedError {
    pub fn new(lipschitz: f64, offset: f64, k: &[f64], m: &[f64]) -> Result<Self> {
        let unit = |v: &[f64]| -> Result<Vec<f64>> {
            let n = dot(v, v).sqrt();
            if !(n > 0.0) {
                return Err(Error::invalid("injected error direction must be nonzero"));
            }
            Ok(v.iter().map(|c| c / n).collect())
        };
        Ok(InjectedError {
            lipschitz,
            offset,
            k: unit(k)?,
            m: unit(m)?,
        })
    }

    pub fn eval(&self, z: &[f64]) -> [f64; 2] {
        let a = self.lipschitz / std::f64::consts::SQRT_2;
        [self.offset + a * dot(&self.k, z).sin(), a * dot(&self.m, z).cos()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub n_x: usize,
    pub n_u: usize,
    pub state_box: Vec<(f64, f64)>,
    pub control_box: Vec<(f64, f64)>,
    /// Coordinates used for obstacle geometry.
    pub position_indices: Vec<usize>,
    /// Only meaningful for the linear benchmark.
    #[serde(default)]
    pub injected_error: Option<InjectedError>,
}

impl SystemSpec {
    pub fn car() -> Self {
        SystemSpec {
            kind: SystemKind::Car,
            n_x: 4,
            n_u: 2,
            state_box: vec![(0.0, 5.0), (-5.0, 5.0), (-1.0, 1.0), (0.3, 1.0)],
            control_box: vec![(-1.0, 1.0), (-1.0, 1.0)],
            position_indices: vec![0, 1],
            injected_error: None,
        }
    }

    pub fn quadrotor() -> Self {
        use std::f64::consts::PI;
        let hover = QUAD_MASS * GRAVITY / 2.0;
        SystemSpec {
            kind: SystemKind::Quadrotor,
            n_x: 6,
            n_u: 2,
            state_box: vec![
                (-2.0, 2.0),
                (-2.0, 2.0),
                (-PI / 3.0, PI / 3.0),
                (-1.0, 1.0),
                (-1.0, 1.0),
                (-PI / 4.0, PI / 4.0),
            ],
            control_box: vec![(hover - 1.0, hover + 1.0), (hover - 1.0, hover + 1.0)],
            position_indices: vec![0, 1],
            injected_error: None,
        }
    }

    pub fn linear() -> Self {
        SystemSpec {
            kind: SystemKind::Linear,
            n_x: 4,
            n_u: 2,
            state_box: vec![(-1.0, 1.0); 4],
            control_box: vec![(-1.0, 1.0); 2],
            position_indices: vec![0, 1],
            injected_error: None,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match SystemKind::parse(name)? {
            SystemKind::Car => Self::car(),
            SystemKind::Quadrotor => Self::quadrotor(),
            SystemKind::Linear => Self::linear(),
        })
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_box.len() != self.n_x {
            return Err(Error::dim(self.n_x, self.state_box.len(), "state box"));
        }
        if self.control_box.len() != self.n_u {
            return Err(Error::dim(self.n_u, self.control_box.len(), "control box"));
        }
        for &(lo, hi) in self.state_box.iter().chain(&self.control_box) {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("invalid box interval [{lo}, {hi}]")));
            }
        }
        if self.position_indices.iter().any(|&i| i >= self.n_x) {
            return Err(Error::Config("position index out of range".into()));
        }
        if self.injected_error.is_some() && self.kind != SystemKind::Linear {
            return Err(Error::Config(
                "injected error is only supported on the linear benchmark".into(),
            ));
        }
        Ok(())
    }

    pub fn position(&self, x: &[f64]) -> Vec<f64> {
        self.position_indices.iter().map(|&i| x[i]).collect()
    }

    /// True dynamics `h(x, u)`.
    pub fn eval_true(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_x {
            return Err(Error::dim(self.n_x, x.len(), "state"));
        }
        if u.len() != self.n_u {
            return Err(Error::dim(self.n_u, u.len(), "control"));
        }
        Ok(self.h(x, u))
    }

    fn h(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self.kind {
            SystemKind::Car => {
                let (th, v) = (x[2], x[3]);
                vec![v * th.cos(), v * th.sin(), u[0], u[1]]
            }
            SystemKind::Quadrotor => {
                let (phi, vx, vz, dphi) = (x[2], x[3], x[4], x[5]);
                vec![
                    vx * phi.cos() - vz * phi.sin(),
                    vx * phi.sin() + vz * phi.cos(),
                    dphi,
                    vz * dphi - GRAVITY * phi.sin(),
                    -vx * dphi - GRAVITY * phi.cos() + (u[0] + u[1]) / QUAD_MASS,
                    QUAD_ARM / QUAD_INERTIA * (u[0] - u[1]),
                ]
            }
            SystemKind::Linear => {
                let mut dx = vec![x[2], x[3], u[0], u[1]];
                if let Some(err) = &self.injected_error {
                    let z: Vec<f64> = x.iter().chain(u).copied().collect();
                    let d = err.eval(&z);
                    dx[2] += d[0];
                    dx[3] += d[1];
                }
                dx
            }
        }
    }
}

impl Dynamics for SystemSpec {
    fn n_x(&self) -> usize {
        self.n_x
    }
    fn n_u(&self) -> usize {
        self.n_u
    }
    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.h(x, u)
    }
}
