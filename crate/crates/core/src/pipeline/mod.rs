//! Stage-by-stage orchestration: data, dynamics, metric, certification,
//! domain, planning, execution, report. Each stage reads the artifacts of
//! earlier stages from the output directory and writes its own, plus a
//! record with its seed, the config hash, and the certified probability.
//!
//! Certification needs a domain to sample from, and the radius search needs
//! certification at every candidate radius, so `certify` runs the radius
//! search and stores the selected radius with the constants; `build-domain`
//! then materializes the domain files for that radius.

pub mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{CcmSource, ModelSource, PipelineConfig, RandomScenarios};

use crate::certify::{certify, CertificationReport, CertifiedConstants};
use crate::controller::discrete_energy;
use crate::domain::{filter_outliers, read_errors, select_radius, DomainFile, RadiusDiagnostics, TrustedDomain};
use crate::error::{Error, Result};
use crate::models::{generate_dataset, ControlAffineModel, Dataset, DatasetRole, SystemSpec};
use crate::nnet::{load_json, save_json, PsdMetricNet, TanhController};
use crate::num::mat::dist_f64;
use crate::num::Mat;
use crate::planner::{plan, verify_plan, ErrorMode, Plan, PlanReport, Scenario};
use crate::sim::{evaluate, rollout, ModeSummary, Stat, TrialOutcome, TrialReport};
use crate::training::{train_ccm, train_dynamics, write_ccm_log, write_dyn_log, CcmBundle, CcmMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainDyn,
    TrainCcm,
    Certify,
    BuildDomain,
    Plan,
    Execute,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenData,
        Stage::TrainDyn,
        Stage::TrainCcm,
        Stage::Certify,
        Stage::BuildDomain,
        Stage::Plan,
        Stage::Execute,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainDyn => "train-dyn",
            Stage::TrainCcm => "train-ccm",
            Stage::Certify => "certify",
            Stage::BuildDomain => "build-domain",
            Stage::Plan => "plan",
            Stage::Execute => "execute",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage '{s}'")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Artifact locations under the output root.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("data/train.csv")
    }
    pub fn dynamics(&self) -> PathBuf {
        self.root.join("models/dynamics.json")
    }
    pub fn ccm(&self) -> PathBuf {
        self.root.join("models/ccm.json")
    }
    pub fn certificate(&self) -> PathBuf {
        self.root.join("certify/certificate.json")
    }
    pub fn domain_dir(&self) -> PathBuf {
        self.root.join("domain")
    }
    pub fn plans_dir(&self) -> PathBuf {
        self.root.join("plans")
    }
    pub fn plan_index(&self) -> PathBuf {
        self.root.join("plans/index.json")
    }
    pub fn trials_dir(&self) -> PathBuf {
        self.root.join("trials")
    }
    pub fn trial_results(&self) -> PathBuf {
        self.root.join("trials/results.json")
    }
    pub fn table(&self) -> PathBuf {
        self.root.join("reports/table.json")
    }
    pub fn stage_record(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("stages/{}.json", stage.name()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    /// Product of the per-constant confidence levels, once certified.
    pub overall_probability: Option<f64>,
    /// Relative to the output root.
    pub artifacts: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub report: CertificationReport,
    pub radius: f64,
    pub radius_search: Option<RadiusDiagnostics>,
    /// Dataset rows kept after outlier filtering.
    pub kept: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id: String,
    pub scenario: Scenario,
    pub report: PlanReport,
    pub verified: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub plan_id: String,
    pub mode: ErrorMode,
    pub trial: usize,
    /// The report without its per-step trace, which is in the trial CSV.
    pub outcome: TrialOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub system: String,
    pub config_hash: String,
    pub overall_probability: Option<f64>,
    pub rows: Vec<ModeSummary>,
}

fn require(stage: Stage, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            stage: stage.name().into(),
            path: path.to_path_buf(),
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Exact `ẋ = [v; u]` for the linear benchmark.
pub fn double_integrator(sparse_b: bool) -> Result<ControlAffineModel> {
    let a = Mat::from_fn(4, 4, |i, j| if j == i + 2 { 1.0 } else { 0.0 });
    let b = Mat::from_fn(4, 2, |i, j| if i == j + 2 { 1.0 } else { 0.0 });
    ControlAffineModel::linear(&a, &b, sparse_b)
}

/// Constant dual metric `W = [[I, −I], [−I, 2I]]` for the double
/// integrator. The strong-mode condition holds with `C^s = (2λ − 2)I`.
pub fn lyapunov_bundle(lam: f64) -> Result<CcmBundle> {
    let w = Mat::from_fn(4, 4, |i, j| match (i / 2, j / 2, i % 2 == j % 2) {
        (0, 0, true) => 1.0,
        (1, 1, true) => 2.0,
        (_, _, true) => -1.0,
        _ => 0.0,
    });
    Ok(CcmBundle {
        mode: CcmMode::Strong,
        metric: PsdMetricNet::constant(&w, 0.01, &[0, 1])?,
        controller: None,
        lam,
    })
}

/// Runs one stage against the output root.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, root: &Path) -> Result<StageRecord> {
    let layout = Layout::new(root);
    let hash = cfg.hash()?;
    let sys = cfg.system_spec()?;
    let (seed, artifacts, summary, prob) = match stage {
        Stage::GenData => gen_data(cfg, &sys, &layout)?,
        Stage::TrainDyn => stage_train_dyn(cfg, &sys, &layout)?,
        Stage::TrainCcm => stage_train_ccm(cfg, &sys, &layout)?,
        Stage::Certify => stage_certify(cfg, &sys, &layout)?,
        Stage::BuildDomain => stage_build_domain(cfg, &layout)?,
        Stage::Plan => stage_plan(cfg, &sys, &layout)?,
        Stage::Execute => stage_execute(cfg, &sys, &layout)?,
        Stage::Report => stage_report(cfg, &layout, &hash)?,
    };
    let overall_probability = prob.or_else(|| {
        read_json::<Certificate>(&layout.certificate())
            .ok()
            .map(|c| c.report.constants.overall_probability)
    });
    let record = StageRecord {
        stage,
        seed,
        config_hash: hash,
        overall_probability,
        artifacts: artifacts
            .into_iter()
            .map(|a| a.strip_prefix(root).map(Path::to_path_buf).unwrap_or(a))
            .collect(),
        summary,
    };
    write_json(&layout.stage_record(stage), &record)?;
    Ok(record)
}

type StageOutput = (u64, Vec<PathBuf>, serde_json::Value, Option<f64>);

fn gen_data(cfg: &PipelineConfig, sys: &SystemSpec, layout: &Layout) -> Result<StageOutput> {
    let seed = cfg.seed_for(0);
    let data = generate_dataset(sys, cfg.data.n_train, cfg.data.sampling, seed)?;
    data.write_csv(&layout.dataset())?;
    Ok((
        seed,
        vec![layout.dataset()],
        serde_json::json!({ "samples": data.len() }),
        None,
    ))
}

fn load_dataset(stage: Stage, layout: &Layout) -> Result<Dataset> {
    require(stage, &layout.dataset())?;
    Dataset::read_csv(&layout.dataset(), DatasetRole::S)
}

fn load_model(stage: Stage, layout: &Layout) -> Result<ControlAffineModel> {
    require(stage, &layout.dynamics())?;
    load_json(&layout.dynamics(), "dynamics")
}

fn load_bundle(stage: Stage, layout: &Layout) -> Result<CcmBundle> {
    require(stage, &layout.ccm())?;
    load_json(&layout.ccm(), "ccm")
}

fn stage_train_dyn(cfg: &PipelineConfig, sys: &SystemSpec, layout: &Layout) -> Result<StageOutput> {
    let data = load_dataset(Stage::TrainDyn, layout)?;
    let mut tc = cfg.train_dyn.clone();
    tc.seed = cfg.seed_for(tc.seed);
    let sparse = cfg.ccm.mode == CcmMode::Strong;
    let log_path = layout.root.join("logs/train_dyn.csv");
    let (g, summary) = match cfg.model {
        ModelSource::ExactLinear => {
            let g = double_integrator(sparse)?;
            let err = data.errors(&g);
            let mse = err.iter().map(|e| e * e).sum::<f64>() / err.len() as f64;
            (g, serde_json::json!({ "model": "exact-linear", "mse": mse }))
        }
        ModelSource::Learned => {
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
            let mut g = ControlAffineModel::new(sys.n_x, sys.n_u, &tc.f_hidden, &tc.b_hidden, sparse, &mut rng)?;
            let hist = train_dynamics(&mut g, &data, &tc)?;
            write_dyn_log(&log_path, &hist)?;
            let last = hist.last().unwrap();
            (
                g,
                serde_json::json!({ "model": "learned", "mse": last.mse, "val_mse": last.val_mse }),
            )
        }
    };
    save_json(&layout.dynamics(), "dynamics", &g)?;
    Ok((tc.seed, vec![layout.dynamics(), log_path], summary, None))
}

fn stage_train_ccm(cfg: &PipelineConfig, sys: &SystemSpec, layout: &Layout) -> Result<StageOutput> {
    let data = load_dataset(Stage::TrainCcm, layout)?;
    let g = load_model(Stage::TrainCcm, layout)?;
    let mut tc = cfg.train_ccm.clone();
    tc.seed = cfg.seed_for(tc.seed);
    let log_path = layout.root.join("logs/train_ccm.csv");
    let (bundle, summary) = match cfg.ccm.source {
        CcmSource::Lyapunov => {
            let b = lyapunov_bundle(cfg.ccm.lyapunov_lam)?;
            (
                b,
                serde_json::json!({ "source": "lyapunov", "lam": cfg.ccm.lyapunov_lam }),
            )
        }
        CcmSource::Trained => {
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
            let (mask, controller) = match cfg.ccm.mode {
                CcmMode::Strong => ((0..sys.n_x - sys.n_u).collect::<Vec<_>>(), None),
                CcmMode::Weak => {
                    let gain = vec![tc.controller_gain; sys.n_u];
                    let c = TanhController::new(
                        sys.n_x,
                        sys.n_u,
                        &gain,
                        &tc.controller_hidden,
                        &cfg.ccm.controller_invariance,
                        &mut rng,
                    )?;
                    ((0..sys.n_x).collect(), Some(c))
                }
            };
            let metric = PsdMetricNet::new(sys.n_x, &mask, &tc.metric_hidden, tc.w_floor, &mut rng)?;
            let mut b = CcmBundle {
                mode: cfg.ccm.mode,
                metric,
                controller,
                lam: tc.lam,
            };
            let hist = train_ccm(&mut b, &g, &data, &tc)?;
            write_ccm_log(&log_path, &hist)?;
            let last = hist.last().map(|h| serde_json::json!({ "loss": h.loss, "nsd": h.nsd }));
            (b, serde_json::json!({ "source": "trained", "last_epoch": last }))
        }
    };
    bundle.validate(&g)?;
    save_json(&layout.ccm(), "ccm", &bundle)?;
    Ok((tc.seed, vec![layout.ccm(), log_path], summary, None))
}

fn stage_certify(cfg: &PipelineConfig, sys: &SystemSpec, layout: &Layout) -> Result<StageOutput> {
    let data = load_dataset(Stage::Certify, layout)?;
    let g = load_model(Stage::Certify, layout)?;
    let bundle = load_bundle(Stage::Certify, layout)?;
    let mut params = cfg.certify.clone();
    params.evt.seed = cfg.seed_for(params.evt.seed);
    let seed = params.evt.seed;

    let all_points = data.points();
    let all_errors = data.errors(&g);
    let kept = match cfg.domain.outlier_quantile {
        Some(q) => Some(filter_outliers(&all_points, q)?),
        None => None,
    };
    let (points, errors): (Vec<Vec<f64>>, Vec<f64>) = match &kept {
        Some(k) => (
            k.iter().map(|&i| all_points[i].clone()).collect(),
            k.iter().map(|&i| all_errors[i]).collect(),
        ),
        None => (all_points, all_errors),
    };

    let reports: Mutex<Vec<(f64, CertificationReport)>> = Mutex::new(vec![]);
    let refusal: Mutex<Option<Error>> = Mutex::new(None);
    let certify_at = |dom: &TrustedDomain| -> Result<CertifiedConstants> {
        match certify(dom, sys, &g, &bundle, &params) {
            Ok(rep) => {
                rep.constants.validate()?;
                let c = rep.constants.clone();
                reports.lock().unwrap().push((dom.radius(), rep));
                Ok(c)
            }
            Err(Error::CertificationRefused {
                statistic,
                p_value,
                batch_size,
            }) => {
                *refusal.lock().unwrap() = Some(Error::CertificationRefused {
                    statistic,
                    p_value,
                    batch_size,
                });
                Err(Error::CertificationRefused {
                    statistic,
                    p_value,
                    batch_size,
                })
            }
            Err(e) => Err(e),
        }
    };
    let (radius, search) = match cfg.domain.radius {
        Some(r) => {
            let dom = TrustedDomain::new(points.clone(), errors.clone(), r, sys.n_x)?;
            certify_at(&dom)?;
            (r, None)
        }
        None => match select_radius(&points, &errors, sys.n_x, &cfg.domain.search, certify_at) {
            Ok((dom, _, diag)) => (dom.radius(), Some(diag)),
            Err(e @ Error::DomainConstruction(_)) => {
                return Err(refusal.into_inner().unwrap().unwrap_or(match e {
                    Error::DomainConstruction(msg) => Error::VerificationFailed(msg),
                    other => other,
                }));
            }
            Err(e) => return Err(e),
        },
    };
    let report = reports
        .into_inner()
        .unwrap()
        .into_iter()
        .find(|(r, _)| *r == radius)
        .map(|(_, rep)| rep)
        .ok_or_else(|| Error::invalid("selected radius has no certification report"))?;
    let prob = report.constants.overall_probability;
    let summary = serde_json::to_value(&report.constants)?;
    let cert = Certificate {
        report,
        radius,
        radius_search: search,
        kept,
    };
    write_json(&layout.certificate(), &cert)?;
    Ok((seed, vec![layout.certificate()], summary, Some(prob)))
}

fn load_certificate(stage: Stage, layout: &Layout) -> Result<Certificate> {
    require(stage, &layout.certificate())?;
    read_json(&layout.certificate())
}

fn stage_build_domain(cfg: &PipelineConfig, layout: &Layout) -> Result<StageOutput> {
    let data = load_dataset(Stage::BuildDomain, layout)?;
    let g = load_model(Stage::BuildDomain, layout)?;
    let cert = load_certificate(Stage::BuildDomain, layout)?;
    let dom = domain_from(&data, &g, &cert)?;
    dom.write(&layout.domain_dir(), Path::new("data/train.csv"), cert.kept.as_deref())?;
    let summary = serde_json::json!({
        "radius": dom.radius(),
        "points": dom.len(),
        "max_error": dom.max_error(),
        "mean_error": dom.mean_error(),
    });
    Ok((cfg.seed, vec![layout.domain_dir().join("domain.json")], summary, None))
}

fn domain_from(data: &Dataset, g: &ControlAffineModel, cert: &Certificate) -> Result<TrustedDomain> {
    let pts = data.points();
    let errs = data.errors(g);
    let (pts, errs) = match &cert.kept {
        Some(k) => (
            k.iter().map(|&i| pts[i].clone()).collect(),
            k.iter().map(|&i| errs[i]).collect(),
        ),
        None => (pts, errs),
    };
    TrustedDomain::new(pts, errs, cert.radius, data.n_x)
}

/// The domain written by `build-domain`, checked against the dataset.
fn load_domain(stage: Stage, layout: &Layout) -> Result<TrustedDomain> {
    let dir = layout.domain_dir();
    require(stage, &dir.join("domain.json"))?;
    let meta: DomainFile = read_json(&dir.join("domain.json"))?;
    let errors = read_errors(&dir.join("domain_errors.csv"))?;
    let data = load_dataset(stage, layout)?;
    let pts = data.points();
    let pts: Vec<Vec<f64>> = match &meta.kept {
        Some(k) => k.iter().map(|&i| pts[i].clone()).collect(),
        None => pts,
    };
    TrustedDomain::new(pts, errors, meta.radius, meta.n_x)
}

/// Start/goal pairs on training states at least `min_separation` apart.
pub fn random_scenarios(
    spec: &RandomScenarios,
    sys: &SystemSpec,
    dom: &TrustedDomain,
    seed: u64,
) -> Result<Vec<Scenario>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<Vec<f64>> = dom.points().iter().map(|p| p[..sys.n_x].to_vec()).collect();
    let mut out = vec![];
    let mut tries = 0;
    while out.len() < spec.count {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::Config(
                "could not draw start/goal pairs with the requested separation".into(),
            ));
        }
        let a = &states[rng.random_range(0..states.len())];
        let b = &states[rng.random_range(0..states.len())];
        let mut sc = Scenario {
            name: format!("s{:02}", out.len()),
            system: sys.name().into(),
            obstacles: spec.obstacles.clone(),
            x_init: a.clone(),
            x_goal: b.clone(),
            mu: spec.mu,
            mu_hat: spec.mu_hat,
            e0: spec.e0,
            rrt: spec.rrt.clone(),
            mode: ErrorMode::Lmtcd,
            goal_indices: spec.goal_indices.clone(),
        };
        sc.rrt.seed = spec.rrt.seed.wrapping_add(seed).wrapping_add(out.len() as u64);
        if sc.goal_distance(a) < spec.min_separation {
            continue;
        }
        let hits = |x: &[f64]| {
            let p = sys.position(x);
            spec.obstacles.iter().any(|o| dist_f64(&p, &o.center) <= o.radius)
        };
        if hits(a) || hits(b) {
            continue;
        }
        out.push(sc);
    }
    Ok(out)
}

fn stage_plan(cfg: &PipelineConfig, sys: &SystemSpec, layout: &Layout) -> Result<StageOutput> {
    let cert = load_certificate(Stage::Plan, layout)?;
    let dom = load_domain(Stage::Plan, layout)?;
    let g = load_model(Stage::Plan, layout)?;
    let constants = cert.report.constants.clone();
    let mut scenarios = cfg.scenarios.list.clone();
    let seed = cfg.seed_for(cfg.scenarios.random.as_ref().map_or(0, |r| r.seed));
    if let Some(spec) = &cfg.scenarios.random {
        scenarios.extend(random_scenarios(spec, sys, &dom, seed)?);
    }
    for (i, sc) in scenarios.iter_mut().enumerate() {
        if sc.name.is_empty() {
            sc.name = format!("scenario{i:02}");
        }
    }
    let jobs: Vec<Scenario> = scenarios
        .iter()
        .flat_map(|sc| {
            cfg.scenarios
                .modes
                .iter()
                .map(move |&m| Scenario { mode: m, ..sc.clone() })
        })
        .collect();
    let results: Vec<Result<(PlanEntry, Option<Plan>)>> = jobs
        .par_iter()
        .map(|sc| {
            let id = format!("{}_{}", sc.name, sc.mode.name());
            let (p, report) = plan(sc, sys, &dom, &constants, &g)?;
            let verified = match &p {
                Some(p) => Some(
                    verify_plan(p, sc, sys, &dom, &constants, &g)?
                        .map_err(|why| log::error!("{id}: {why}"))
                        .is_ok(),
                ),
                None => None,
            };
            Ok((
                PlanEntry {
                    id,
                    scenario: sc.clone(),
                    report,
                    verified,
                },
                p,
            ))
        })
        .collect();
    let dir = layout.plans_dir();
    std::fs::create_dir_all(&dir)?;
    let mut index = vec![];
    let mut feasible = 0;
    for r in results {
        let (entry, p) = r?;
        entry
            .report
            .write_json(&dir.join(format!("{}_rejections.json", entry.id)))?;
        if let Some(p) = p {
            p.write_csv(&dir.join(format!("{}.csv", entry.id)))?;
            write_json(&dir.join(format!("{}.json", entry.id)), &p)?;
            feasible += 1;
        }
        index.push(entry);
    }
    write_json(&layout.plan_index(), &index)?;
    let summary = serde_json::json!({ "plans": index.len(), "feasible": feasible });
    Ok((seed, vec![layout.plan_index()], summary, None))
}

/// A start `x₀` whose straight-line energy to `x` is at most `0.9·e0`,
/// which bounds the geodesic energy by `e0`.
fn offset_start(bundle: &CcmBundle, x: &[f64], e0: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if e0 <= 0.0 {
        return x.to_vec();
    }
    let dir: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(rng)).collect();
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let energy = |s: f64| {
        let pts: Vec<Vec<f64>> = (0..=16)
            .map(|k| {
                x.iter()
                    .zip(&dir)
                    .map(|(a, d)| a + s * k as f64 / 16.0 * d / n)
                    .collect()
            })
            .collect();
        discrete_energy(&bundle.metric, &pts).0
    };
    let target = 0.9 * e0 * rng.random::<f64>();
    let (mut lo, mut hi) = (0.0, 1.0);
    while energy(hi) < target && hi < 1e3 {
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if energy(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    x.iter().zip(&dir).map(|(a, d)| a + lo * d / n).collect()
}

fn stage_execute(cfg: &PipelineConfig, sys: &SystemSpec, layout: &Layout) -> Result<StageOutput> {
    require(Stage::Execute, &layout.plan_index())?;
    let index: Vec<PlanEntry> = read_json(&layout.plan_index())?;
    let cert = load_certificate(Stage::Execute, layout)?;
    let dom = load_domain(Stage::Execute, layout)?;
    let g = load_model(Stage::Execute, layout)?;
    let bundle = load_bundle(Stage::Execute, layout)?;
    let seed = cfg.seed_for(cfg.execute.seed);
    let trials = cfg.execute.trials_per_plan.max(1);
    let mut jobs = vec![];
    for (pi, entry) in index.iter().enumerate() {
        if entry.report.feasible {
            let p: Plan = read_json(&layout.plans_dir().join(format!("{}.json", entry.id)))?;
            let p = std::sync::Arc::new(p);
            for k in 0..trials {
                jobs.push((pi, k, Some(p.clone())));
            }
        } else {
            jobs.push((pi, 0, None));
        }
    }
    let dir = layout.trials_dir();
    std::fs::create_dir_all(&dir)?;
    let results: Vec<Result<TrialRecord>> = jobs
        .par_iter()
        .map(|(pi, k, p)| {
            let entry = &index[*pi];
            let outcome = match p {
                None => TrialOutcome::Infeasible,
                Some(p) => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(seed.wrapping_add((*pi as u64) << 16).wrapping_add(*k as u64));
                    let x0 = if *k == 0 {
                        entry.scenario.x_init.clone()
                    } else {
                        offset_start(&bundle, &entry.scenario.x_init, entry.scenario.e0, &mut rng)
                    };
                    let mut rep: TrialReport = rollout(
                        p,
                        &entry.scenario,
                        sys,
                        &bundle,
                        &g,
                        &cert.report.constants,
                        &dom,
                        &x0,
                        &cfg.execute.rollout,
                    )?;
                    rep.write_csv(&dir.join(format!("{}_{k}.csv", entry.id)))?;
                    rep.trace.clear();
                    TrialOutcome::Executed(rep)
                }
            };
            Ok(TrialRecord {
                plan_id: entry.id.clone(),
                mode: entry.scenario.mode,
                trial: *k,
                outcome,
            })
        })
        .collect();
    let records: Vec<TrialRecord> = results.into_iter().collect::<Result<_>>()?;
    write_json(&layout.trial_results(), &records)?;
    let violations = records
        .iter()
        .filter(|r| matches!(&r.outcome, TrialOutcome::Executed(t) if t.violation))
        .count();
    let summary = serde_json::json!({ "trials": records.len(), "violations": violations });
    Ok((seed, vec![layout.trial_results()], summary, None))
}

fn stage_report(cfg: &PipelineConfig, layout: &Layout, hash: &str) -> Result<StageOutput> {
    require(Stage::Report, &layout.trial_results())?;
    let records: Vec<TrialRecord> = read_json(&layout.trial_results())?;
    let prob = read_json::<Certificate>(&layout.certificate())
        .ok()
        .map(|c| c.report.constants.overall_probability);
    let rows = evaluate(&records.iter().map(|r| (r.mode, r.outcome.clone())).collect::<Vec<_>>());
    let table = SummaryTable {
        system: cfg.system.clone(),
        config_hash: hash.to_string(),
        overall_probability: prob,
        rows,
    };
    write_json(&layout.table(), &table)?;
    let mut by_mode = BTreeMap::new();
    for r in &table.rows {
        by_mode.insert(
            r.mode.name().to_string(),
            serde_json::json!({
                "avg_tracking_error": Stat::describe(&r.avg_tracking_error),
                "goal_error": Stat::describe(&r.goal_error),
                "violations": r.violations,
                "infeasible": r.infeasible,
                "unstable": r.unstable,
            }),
        );
    }
    Ok((cfg.seed, vec![layout.table()], serde_json::to_value(by_mode)?, prob))
}

/// Runs `stages` in order, stopping at the first failure.
pub fn run_stages(stages: &[Stage], cfg: &PipelineConfig, root: &Path) -> Result<Vec<StageRecord>> {
    stages.iter().map(|&s| run_stage(s, cfg, root)).collect()
}

/// Process exit status for a stage failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingArtifact { .. } => 2,
        Error::CertificationRefused { .. } => 3,
        _ => 1,
    }
}
