//! Kinodynamic RRT over piecewise-constant controls with tube-aware domain
//! and collision checks, plus the baseline error modes.
//!
//! Every candidate edge is integrated on the learned model together with its
//! tracking tube. The domain check asks for the ball of radius
//! `ε̄(t) + ū_fb(t)` around `(x*(t), u_c)` to lie inside `D`, which is the
//! condition under which executed state-control pairs provably stay in `D`.
//!
//! Obstacles are balls in position coordinates, assumed already expanded for
//! the robot geometry. The tube is a Euclidean ball in the full state, and
//! since `‖pos(x) − pos(x*)‖ ≤ ‖x − x*‖` its position projection is a disc of
//! the same radius, so a nominal position farther than `radius + ε̄` from
//! every obstacle center keeps the whole tube collision free.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certify::CertifiedConstants;
use crate::domain::TrustedDomain;
use crate::error::{Error, Result};
use crate::models::{Dynamics, SystemSpec};
use crate::num::mat::dist_f64;
use crate::num::OdeSolution;
use crate::training::CcmMode;
use crate::tube::{default_dt, propagate_segment, ErrorModel, TrackingTube, TubeParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorMode {
    /// Data-driven tubes that must stay in the trusted domain.
    #[default]
    #[serde(rename = "lmtcd")]
    Lmtcd,
    /// Uniform disturbance at the mean training error, kept in `D`.
    #[serde(rename = "b1-mean-in-D", alias = "b1")]
    B1MeanInD,
    /// Uniform disturbance at the max training error, kept in `D`.
    #[serde(rename = "b2-max-in-D", alias = "b2")]
    B2MaxInD,
    /// Uniform disturbance at the max training error, free to leave `D`.
    #[serde(rename = "b3-max-free", alias = "b3")]
    B3MaxFree,
    /// Data-driven tubes, free to leave `D`.
    #[serde(rename = "b4-lip-free", alias = "b4")]
    B4LipFree,
}

impl ErrorMode {
    pub const ALL: [ErrorMode; 5] = [
        ErrorMode::Lmtcd,
        ErrorMode::B1MeanInD,
        ErrorMode::B2MaxInD,
        ErrorMode::B3MaxFree,
        ErrorMode::B4LipFree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorMode::Lmtcd => "lmtcd",
            ErrorMode::B1MeanInD => "b1-mean-in-D",
            ErrorMode::B2MaxInD => "b2-max-in-D",
            ErrorMode::B3MaxFree => "b3-max-free",
            ErrorMode::B4LipFree => "b4-lip-free",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ErrorMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.name()[..2].eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown error mode '{s}'")))
    }

    /// Whether planning enforces the domain margin check.
    pub fn stays_in_domain(self) -> bool {
        matches!(self, ErrorMode::Lmtcd | ErrorMode::B1MeanInD | ErrorMode::B2MaxInD)
    }

    pub fn error_model(self, dom: &TrustedDomain) -> ErrorModel {
        match self {
            ErrorMode::Lmtcd | ErrorMode::B4LipFree => ErrorModel::Data,
            ErrorMode::B1MeanInD => ErrorModel::Constant(dom.mean_error()),
            ErrorMode::B2MaxInD | ErrorMode::B3MaxFree => ErrorModel::Constant(dom.max_error()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RrtParams {
    pub p_goal: f64,
    /// Dwell-time range (s).
    pub dwell: (f64, f64),
    /// Defaults to the system's control box.
    pub control_box: Option<Vec<(f64, f64)>>,
    pub max_iterations: usize,
    pub seed: u64,
    /// Largest integration step along an edge (s).
    pub max_dt: f64,
}

impl Default for RrtParams {
    fn default() -> Self {
        RrtParams {
            p_goal: 0.1,
            dwell: (0.2, 1.0),
            control_box: None,
            max_iterations: 3000,
            seed: 0,
            max_dt: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub system: String,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub x_init: Vec<f64>,
    pub x_goal: Vec<f64>,
    /// Goal tolerance.
    pub mu: f64,
    /// Largest tolerated tracking error.
    pub mu_hat: f64,
    /// Initial Riemannian energy bound.
    #[serde(default)]
    pub e0: f64,
    #[serde(default)]
    pub rrt: RrtParams,
    #[serde(default)]
    pub mode: ErrorMode,
    /// State coordinates compared against the goal; all of them if unset.
    #[serde(default)]
    pub goal_indices: Option<Vec<usize>>,
}

impl Scenario {
    pub fn validate(&self, sys: &SystemSpec) -> Result<()> {
        if self.system != sys.name() {
            return Err(Error::Config(format!(
                "scenario is for '{}', system is '{}'",
                self.system,
                sys.name()
            )));
        }
        if !(self.mu > 0.0 && self.mu_hat > 0.0) {
            return Err(Error::Config("goal and tracking tolerances must be positive".into()));
        }
        if self.x_init.len() != sys.n_x || self.x_goal.len() != sys.n_x {
            return Err(Error::dim(
                sys.n_x,
                self.x_init.len().min(self.x_goal.len()),
                "scenario start/goal",
            ));
        }
        if !(self.e0 >= 0.0) {
            return Err(Error::Config("initial energy must be non-negative".into()));
        }
        let (lo, hi) = self.rrt.dwell;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("invalid dwell range [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.rrt.p_goal) {
            return Err(Error::Config("goal bias must lie in [0, 1]".into()));
        }
        if !(self.rrt.max_dt > 0.0) {
            return Err(Error::Config("max_dt must be positive".into()));
        }
        if let Some(b) = &self.rrt.control_box {
            if b.len() != sys.n_u || b.iter().any(|(l, h)| !(l <= h)) {
                return Err(Error::Config("invalid control box".into()));
            }
        }
        if let Some(idx) = &self.goal_indices {
            if idx.is_empty() || idx.iter().any(|&i| i >= sys.n_x) {
                return Err(Error::Config("invalid goal indices".into()));
            }
        }
        let np = sys.position_indices.len();
        if self
            .obstacles
            .iter()
            .any(|o| o.center.len() != np || !(o.radius >= 0.0))
        {
            return Err(Error::Config(
                "obstacles must be non-negative balls in position coordinates".into(),
            ));
        }
        Ok(())
    }

    pub fn goal_distance(&self, x: &[f64]) -> f64 {
        match &self.goal_indices {
            Some(idx) => idx.iter().map(|&i| (x[i] - self.x_goal[i]).powi(2)).sum::<f64>().sqrt(),
            None => dist_f64(x, &self.x_goal),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// True iff the tube collides: some substep has an obstacle with
/// `‖pos(x*(t)) − c‖ ≤ radius + ε̄(t)`.
pub fn tube_collision_check(nominal: &[Vec<f64>], eps_bar: &[f64], obstacles: &[Obstacle], position: &[usize]) -> bool {
    nominal
        .iter()
        .zip(eps_bar)
        .any(|(x, &e)| collides(x, e, obstacles, position))
}

fn collides(x: &[f64], eps: f64, obstacles: &[Obstacle], position: &[usize]) -> bool {
    obstacles.iter().any(|o| {
        let d2: f64 = position.iter().zip(&o.center).map(|(&i, c)| (x[i] - c).powi(2)).sum();
        d2.sqrt() <= o.radius + eps
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub x: Vec<f64>,
    pub eps_bar: f64,
    pub energy: f64,
    pub time: f64,
    pub parent: Option<usize>,
    /// Control held on the incoming edge.
    pub u_c: Vec<f64>,
    /// Dwell of the incoming edge.
    pub t_c: f64,
    /// Integration step of the incoming edge.
    pub dt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    DomainExit,
    TubeTooLarge,
    Collision,
    Diverged,
}

impl Rejection {
    pub fn name(self) -> &'static str {
        match self {
            Rejection::DomainExit => "domain-exit",
            Rejection::TubeTooLarge => "tube-too-large",
            Rejection::Collision => "collision",
            Rejection::Diverged => "diverged",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extension {
    Added { index: usize, reached_goal: bool },
    Rejected(Rejection),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub u: Vec<f64>,
    pub dwell: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub segments: Vec<Segment>,
    pub nominal: OdeSolution,
    /// `u*` at each nominal sample; the boundary sample takes the next control.
    pub controls: Vec<Vec<f64>>,
    pub tube: TrackingTube,
    pub iterations: usize,
    pub tree_size: usize,
}

impl Plan {
    pub fn duration(&self) -> f64 {
        *self.nominal.times.last().unwrap()
    }

    pub fn mean_eps_bar(&self) -> f64 {
        self.tube.eps_bar.iter().sum::<f64>() / self.tube.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let n_x = self.nominal.states[0].len();
        let n_u = self.controls.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((0..n_x).map(|i| format!("x{i}")));
        header.extend((0..n_u).map(|i| format!("u{i}")));
        header.extend(["eps_bar".to_string(), "u_fb_bar".to_string()]);
        w.write_record(&header)?;
        for k in 0..self.nominal.len() {
            let mut row = vec![self.nominal.times[k]];
            row.extend_from_slice(&self.nominal.states[k]);
            row.extend_from_slice(&self.controls[k]);
            row.extend([self.tube.eps_bar[k], self.tube.u_fb_bar[k]]);
            w.write_record(row.iter().map(|v| format!("{v:.17e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub scenario: String,
    pub mode: ErrorMode,
    pub feasible: bool,
    pub iterations: usize,
    pub tree_size: usize,
    pub rejections: BTreeMap<String, usize>,
    /// Set when the start state already fails the domain margin.
    pub initial_margin_failed: bool,
}

impl PlanReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Planner state: a tree grown from the start of one scenario.
pub struct Planner<'a> {
    scenario: &'a Scenario,
    position: Vec<usize>,
    control_box: Vec<(f64, f64)>,
    dom: &'a TrustedDomain,
    g: &'a dyn Dynamics,
    tube: TubeParams,
    eps_max: Option<f64>,
    pub nodes: Vec<PlanNode>,
    rng: ChaCha8Rng,
}

impl<'a> Planner<'a> {
    pub fn new(
        scenario: &'a Scenario,
        sys: &SystemSpec,
        dom: &'a TrustedDomain,
        constants: &CertifiedConstants,
        g: &'a dyn Dynamics,
    ) -> Result<Self> {
        scenario.validate(sys)?;
        let tube = TubeParams::from_constants(constants, scenario.mode.error_model(dom))?;
        let eps_max = match constants.mode {
            CcmMode::Weak => Some(constants.eps_max.unwrap_or(f64::INFINITY).min(scenario.mu_hat)),
            CcmMode::Strong => None,
        };
        let root = PlanNode {
            x: scenario.x_init.clone(),
            eps_bar: tube.eps_bar(scenario.e0),
            energy: scenario.e0,
            time: 0.0,
            parent: None,
            u_c: vec![],
            t_c: 0.0,
            dt: 0.0,
        };
        Ok(Planner {
            scenario,
            position: sys.position_indices.clone(),
            control_box: scenario
                .rrt
                .control_box
                .clone()
                .unwrap_or_else(|| sys.control_box.clone()),
            dom,
            g,
            tube,
            eps_max,
            nodes: vec![root],
            rng: ChaCha8Rng::seed_from_u64(scenario.rrt.seed),
        })
    }

    pub fn tube_params(&self) -> &TubeParams {
        &self.tube
    }

    pub fn eps_max(&self) -> Option<f64> {
        self.eps_max
    }

    /// The start state admits some control with the initial tube inside `D`.
    pub fn initial_margin_ok(&self) -> bool {
        if !self.scenario.mode.stays_in_domain() {
            return true;
        }
        let eps = self.tube.eps_bar(self.scenario.e0);
        self.dom
            .state_margin_check(&self.scenario.x_init, eps + self.tube.u_fb_bar(eps))
    }

    fn sample_node(&mut self) -> usize {
        if self.rng.random::<f64>() < self.scenario.rrt.p_goal {
            let mut best = (f64::INFINITY, 0);
            for (i, n) in self.nodes.iter().enumerate() {
                let d = self.scenario.goal_distance(&n.x);
                if d < best.0 {
                    best = (d, i);
                }
            }
            best.1
        } else {
            self.rng.random_range(0..self.nodes.len())
        }
    }

    fn edge(&self, from: usize, u: &[f64], dwell: f64, dt: f64) -> Result<(OdeSolution, TrackingTube)> {
        let n = &self.nodes[from];
        propagate_segment(&self.tube, Some(self.dom), self.g, &n.x, u, n.time, dwell, n.energy, dt)
    }

    /// Runs the per-substep checks; returns the first goal-reaching index.
    fn check_edge(
        &self,
        nominal: &OdeSolution,
        tube: &TrackingTube,
        u: &[f64],
    ) -> std::result::Result<Option<usize>, Rejection> {
        for k in 0..nominal.len() {
            let x = &nominal.states[k];
            let eps = tube.eps_bar[k];
            if !eps.is_finite() || !tube.u_fb_bar[k].is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(Rejection::Diverged);
            }
            if self.scenario.mode.stays_in_domain() {
                let mut z = x.clone();
                z.extend_from_slice(u);
                if !self.dom.margin_check(&z, eps + tube.u_fb_bar[k]) {
                    return Err(Rejection::DomainExit);
                }
            }
            if self.eps_max.is_some_and(|m| eps > m) {
                return Err(Rejection::TubeTooLarge);
            }
            if collides(x, eps, &self.scenario.obstacles, &self.position) {
                return Err(Rejection::Collision);
            }
            if k > 0 && self.scenario.goal_distance(x) <= self.scenario.mu {
                return Ok(Some(k));
            }
        }
        Ok(None)
    }

    /// One RRT iteration: sample a node, a control and a dwell, integrate,
    /// check, and on success append the new node.
    pub fn extend(&mut self) -> Extension {
        let from = self.sample_node();
        let u: Vec<f64> = self
            .control_box
            .iter()
            .map(|&(lo, hi)| if hi > lo { self.rng.random_range(lo..hi) } else { lo })
            .collect();
        let (lo, hi) = self.scenario.rrt.dwell;
        let dwell = if hi > lo { self.rng.random_range(lo..hi) } else { lo };
        let dt = default_dt(dwell, self.scenario.rrt.max_dt);
        let Ok((mut nominal, mut tube)) = self.edge(from, &u, dwell, dt) else {
            return Extension::Rejected(Rejection::Diverged);
        };
        let mut dwell = dwell;
        let mut reached = match self.check_edge(&nominal, &tube, &u) {
            Ok(r) => r,
            Err(why) => return Extension::Rejected(why),
        };
        if let Some(k) = reached.filter(|&k| k + 1 < nominal.len()) {
            // Truncate at the goal; recompute so the stored node is exactly
            // what a replay of the schedule produces.
            dwell = nominal.times[k] - self.nodes[from].time;
            let Ok((nom, tb)) = self.edge(from, &u, dwell, dt) else {
                return Extension::Rejected(Rejection::Diverged);
            };
            reached = match self.check_edge(&nom, &tb, &u) {
                Ok(r) => r.filter(|&j| j + 1 == nom.len()),
                Err(why) => return Extension::Rejected(why),
            };
            nominal = nom;
            tube = tb;
        }
        let energy = *tube.energy.last().unwrap();
        self.nodes.push(PlanNode {
            x: nominal.last_state().to_vec(),
            eps_bar: self.tube.eps_bar(energy),
            energy,
            time: self.nodes[from].time + dwell,
            parent: Some(from),
            u_c: u,
            t_c: dwell,
            dt,
        });
        Extension::Added {
            index: self.nodes.len() - 1,
            reached_goal: reached.is_some(),
        }
    }

    /// Control schedule from the root to `leaf`.
    pub fn segments_to(&self, leaf: usize) -> Vec<Segment> {
        let mut segs = vec![];
        let mut i = leaf;
        while let Some(p) = self.nodes[i].parent {
            let n = &self.nodes[i];
            segs.push(Segment {
                u: n.u_c.clone(),
                dwell: n.t_c,
                dt: n.dt,
            });
            i = p;
        }
        segs.reverse();
        segs
    }

    fn report(
        &self,
        feasible: bool,
        iterations: usize,
        rejections: BTreeMap<String, usize>,
        initial: bool,
    ) -> PlanReport {
        PlanReport {
            scenario: self.scenario.name.clone(),
            mode: self.scenario.mode,
            feasible,
            iterations,
            tree_size: self.nodes.len(),
            rejections,
            initial_margin_failed: initial,
        }
    }

    /// Grows the tree until a nominal reaches the goal ball or the iteration
    /// budget runs out.
    pub fn run(mut self) -> Result<(Option<Plan>, PlanReport)> {
        let mut rejections: BTreeMap<String, usize> = BTreeMap::new();
        if !self.initial_margin_ok() {
            return Ok((None, self.report(false, 0, rejections, true)));
        }
        if self.scenario.goal_distance(&self.scenario.x_init) <= self.scenario.mu {
            let plan = replay(
                &self.tube,
                self.dom,
                self.g,
                &self.scenario.x_init,
                self.scenario.e0,
                &[],
                0,
                1,
            )?;
            return Ok((Some(plan), self.report(true, 0, rejections, false)));
        }
        for it in 1..=self.scenario.rrt.max_iterations {
            match self.extend() {
                Extension::Added {
                    index,
                    reached_goal: true,
                } => {
                    let segs = self.segments_to(index);
                    let plan = replay(
                        &self.tube,
                        self.dom,
                        self.g,
                        &self.scenario.x_init,
                        self.scenario.e0,
                        &segs,
                        it,
                        self.nodes.len(),
                    )?;
                    return Ok((Some(plan), self.report(true, it, rejections, false)));
                }
                Extension::Added { .. } => {}
                Extension::Rejected(why) => *rejections.entry(why.name().to_string()).or_default() += 1,
            }
        }
        let n = self.scenario.rrt.max_iterations;
        Ok((None, self.report(false, n, rejections, false)))
    }
}

/// Integrates a schedule from the start and concatenates nominal, controls
/// and tube.
#[allow(clippy::too_many_arguments)]
fn replay(
    tube_params: &TubeParams,
    dom: &TrustedDomain,
    g: &dyn Dynamics,
    x0: &[f64],
    e0: f64,
    segments: &[Segment],
    iterations: usize,
    tree_size: usize,
) -> Result<Plan> {
    let mut nominal = OdeSolution {
        times: vec![0.0],
        states: vec![x0.to_vec()],
    };
    let mut controls = vec![segments.first().map_or_else(|| vec![0.0; g.n_u()], |s| s.u.clone())];
    let mut tube = TrackingTube::default();
    let (mut x, mut e, mut t) = (x0.to_vec(), e0, 0.0);
    if segments.is_empty() {
        let (_, tb) = propagate_segment(tube_params, Some(dom), g, x0, &controls[0], 0.0, 0.0, e0, 1.0)?;
        tube = tb;
    }
    for (i, s) in segments.iter().enumerate() {
        let (seg, tb) = propagate_segment(tube_params, Some(dom), g, &x, &s.u, t, s.dwell, e, s.dt)?;
        nominal.times.extend_from_slice(&seg.times[1..]);
        nominal.states.extend_from_slice(&seg.states[1..]);
        let next = segments.get(i + 1).unwrap_or(s);
        for _ in 2..seg.len() {
            controls.push(s.u.clone());
        }
        controls.push(next.u.clone());
        tube.extend(&tb);
        x = seg.last_state().to_vec();
        e = *tb.energy.last().unwrap();
        t += s.dwell;
    }
    Ok(Plan {
        segments: segments.to_vec(),
        nominal,
        controls,
        tube,
        iterations,
        tree_size,
    })
}

/// Plans one scenario.
pub fn plan(
    scenario: &Scenario,
    sys: &SystemSpec,
    dom: &TrustedDomain,
    constants: &CertifiedConstants,
    g: &dyn Dynamics,
) -> Result<(Option<Plan>, PlanReport)> {
    Planner::new(scenario, sys, dom, constants, g)?.run()
}

/// Independent re-check of a returned plan: replays the schedule with the
/// tube, compares against the stored tube, and re-runs every substep check
/// including the goal. Returns a description of the first failure.
pub fn verify_plan(
    plan: &Plan,
    scenario: &Scenario,
    sys: &SystemSpec,
    dom: &TrustedDomain,
    constants: &CertifiedConstants,
    g: &dyn Dynamics,
) -> Result<std::result::Result<(), String>> {
    let params = TubeParams::from_constants(constants, scenario.mode.error_model(dom))?;
    let eps_max = match constants.mode {
        CcmMode::Weak => Some(constants.eps_max.unwrap_or(f64::INFINITY).min(scenario.mu_hat)),
        CcmMode::Strong => None,
    };
    let mut x = scenario.x_init.clone();
    let mut e = scenario.e0;
    let mut t = 0.0;
    let mut base = 0;
    let fail = |msg: String| Ok(Err(msg));
    for s in &plan.segments {
        let (seg, tb) = propagate_segment(&params, Some(dom), g, &x, &s.u, t, s.dwell, e, s.dt)?;
        for k in 0..seg.len() {
            let stored = plan.tube.eps_bar.get(base + k).copied().unwrap_or(f64::NAN);
            if !((stored - tb.eps_bar[k]).abs() <= 1e-9) {
                return fail(format!(
                    "tube mismatch at t = {}: stored {stored}, replayed {}",
                    seg.times[k], tb.eps_bar[k]
                ));
            }
            let xs = &seg.states[k];
            let q = tb.eps_bar[k] + tb.u_fb_bar[k];
            if scenario.mode.stays_in_domain() {
                let z: Vec<f64> = xs.iter().chain(&s.u).copied().collect();
                let near = dom
                    .points()
                    .iter()
                    .map(|p| dist_f64(p, &z))
                    .fold(f64::INFINITY, f64::min);
                if !(q <= dom.radius() && near <= dom.radius() - q) {
                    return fail(format!("domain margin fails at t = {}", seg.times[k]));
                }
            }
            if eps_max.is_some_and(|m| tb.eps_bar[k] > m) {
                return fail(format!("tube exceeds ε_max at t = {}", seg.times[k]));
            }
            for o in &scenario.obstacles {
                let p = sys.position(xs);
                if dist_f64(&p, &o.center) <= o.radius + tb.eps_bar[k] {
                    return fail(format!("tube meets an obstacle at t = {}", seg.times[k]));
                }
            }
        }
        base += seg.len() - 1;
        x = seg.last_state().to_vec();
        e = *tb.energy.last().unwrap();
        t += s.dwell;
    }
    if scenario.goal_distance(&x) > scenario.mu {
        return fail("final nominal is outside the goal ball".into());
    }
    Ok(Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::CertifiedConstants;

    struct Drift;
    impl Dynamics for Drift {
        fn n_x(&self) -> usize {
            2
        }
        fn n_u(&self) -> usize {
            2
        }
        fn eval(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
            u.to_vec()
        }
    }

    fn plane() -> SystemSpec {
        let mut s = SystemSpec::linear();
        s.n_x = 2;
        s.state_box = vec![(-1.0, 1.0); 2];
        s.position_indices = vec![0, 1];
        s
    }

    fn constants() -> CertifiedConstants {
        CertifiedConstants {
            mode: CcmMode::Strong,
            l_hg: 0.0,
            lam: 1.0,
            lam_max_m: 1.0,
            lam_min_m: 1.0,
            delta_u: Some(0.5),
            u_fb_bar: None,
            lam_ccm: -1.0,
            eps_max: None,
            rho_per_constant: BTreeMap::new(),
            overall_probability: 1.0,
        }
    }

    /// Dense grid of state-control points over `[-1, 1]² × [-1, 1]²`.
    fn domain(extent: f64) -> TrustedDomain {
        let mut pts = vec![];
        let g = |i: usize| -extent + 2.0 * extent * i as f64 / 6.0;
        for a in 0..7 {
            for b in 0..7 {
                for c in 0..5 {
                    for d in 0..5 {
                        pts.push(vec![g(a), g(b), -1.0 + c as f64 * 0.5, -1.0 + d as f64 * 0.5]);
                    }
                }
            }
        }
        let n = pts.len();
        TrustedDomain::new(pts, vec![0.0; n], 0.6, 2).unwrap()
    }

    fn scenario(goal: [f64; 2]) -> Scenario {
        Scenario {
            name: "t".into(),
            system: "linear".into(),
            obstacles: vec![],
            x_init: vec![0.0, 0.0],
            x_goal: goal.to_vec(),
            mu: 0.15,
            mu_hat: 1.0,
            e0: 0.0,
            rrt: RrtParams {
                dwell: (0.1, 0.3),
                max_iterations: 2000,
                seed: 3,
                max_dt: 0.05,
                ..RrtParams::default()
            },
            mode: ErrorMode::Lmtcd,
            goal_indices: None,
        }
    }

    #[test]
    fn trivial_plan() {
        let dom = domain(1.0);
        let sc = scenario([0.0, 0.0]);
        let (plan, rep) = plan(&sc, &plane(), &dom, &constants(), &Drift).unwrap();
        assert!(rep.feasible);
        assert!(plan.unwrap().segments.is_empty());
    }

    #[test]
    fn reaches_goal_and_verifies() {
        let dom = domain(1.0);
        let sc = scenario([0.6, -0.4]);
        let (p, rep) = plan(&sc, &plane(), &dom, &constants(), &Drift).unwrap();
        let p = p.expect("feasible");
        assert!(rep.feasible);
        assert_eq!(p.nominal.len(), p.tube.len());
        assert_eq!(p.nominal.len(), p.controls.len());
        verify_plan(&p, &sc, &plane(), &dom, &constants(), &Drift)
            .unwrap()
            .unwrap();
        let (again, _) = plan(&sc, &plane(), &dom, &constants(), &Drift).unwrap();
        assert_eq!(again.unwrap(), p);
    }

    #[test]
    fn domain_exit_rejected_unless_free() {
        let dom = domain(0.3);
        let mut sc = scenario([1.5, 1.5]);
        sc.rrt.max_iterations = 300;
        let (p, rep) = plan(&sc, &plane(), &dom, &constants(), &Drift).unwrap();
        assert!(p.is_none());
        assert!(rep.rejections.get("domain-exit").copied().unwrap_or(0) > 0);
        sc.mode = ErrorMode::B3MaxFree;
        sc.rrt.max_iterations = 3000;
        let (p, _) = plan(&sc, &plane(), &dom, &constants(), &Drift).unwrap();
        assert!(p.is_some());
    }

    #[test]
    fn collision_geometry() {
        let obs = [Obstacle {
            center: vec![0.0, 0.0],
            radius: 0.2,
        }];
        assert!(!tube_collision_check(&[vec![0.5, 0.0]], &[0.1], &[], &[0, 1]));
        assert!(tube_collision_check(&[vec![0.0, 0.0]], &[0.0], &obs, &[0, 1]));
        assert!(tube_collision_check(&[vec![0.3, 0.0]], &[0.1], &obs, &[0, 1]));
        assert!(!tube_collision_check(&[vec![0.31, 0.0]], &[0.1], &obs, &[0, 1]));
    }

    #[test]
    fn walled_goal_is_collision_infeasible() {
        let dom = domain(1.0);
        let mut sc = scenario([0.8, 0.0]);
        sc.rrt.max_iterations = 400;
        // A ring of obstacles around the goal with gaps narrower than the
        // nominal itself.
        sc.obstacles = (0..16)
            .map(|i| {
                let a = i as f64 * std::f64::consts::PI / 8.0;
                Obstacle {
                    center: vec![0.8 + 0.3 * a.cos(), 0.3 * a.sin()],
                    radius: 0.07,
                }
            })
            .collect();
        let (p, rep) = plan(&sc, &plane(), &dom, &constants(), &Drift).unwrap();
        assert!(p.is_none());
        let coll = rep.rejections.get("collision").copied().unwrap_or(0);
        assert!(rep.rejections.values().all(|&v| v <= coll));
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in ErrorMode::ALL {
            assert_eq!(ErrorMode::parse(m.name()).unwrap(), m);
        }
        assert_eq!(ErrorMode::parse("b2").unwrap(), ErrorMode::B2MaxInD);
    }
}
