//! The pipeline configuration file: a single TOML tree, with `key=value`
//! overrides applied to dotted paths before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certify::CertifyParams;
use crate::domain::RadiusParams;
use crate::error::{Error, Result};
use crate::models::{InjectedError, SamplingMode, SystemSpec};
use crate::planner::{ErrorMode, Obstacle, RrtParams, Scenario};
use crate::sim::RolloutParams;
use crate::training::{CcmMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSource {
    /// Trains `f` and `B` networks on the dataset.
    Learned,
    /// The exact double-integrator model (linear benchmark only).
    ExactLinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CcmSource {
    Trained,
    /// Constant Lyapunov metric of the double integrator (linear benchmark only).
    Lyapunov,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub sampling: SamplingMode,
    /// Replaces the system's state box when set.
    pub state_box: Option<Vec<(f64, f64)>>,
    pub control_box: Option<Vec<(f64, f64)>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2000,
            sampling: SamplingMode::UniformBox,
            state_box: None,
            control_box: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcmConfig {
    pub mode: CcmMode,
    pub source: CcmSource,
    /// Contraction rate of the Lyapunov metric; trained bundles use `train_ccm.lam`.
    pub lyapunov_lam: f64,
    /// Reference-state coordinates the learned controller ignores.
    pub controller_invariance: Vec<usize>,
}

impl Default for CcmConfig {
    fn default() -> Self {
        CcmConfig {
            mode: CcmMode::Strong,
            source: CcmSource::Trained,
            lyapunov_lam: 0.5,
            controller_invariance: vec![],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    /// Fixed radius; the radius search runs when unset.
    pub radius: Option<f64>,
    pub search: RadiusParams,
    /// Drop points whose nearest-neighbour distance exceeds this quantile.
    pub outlier_quantile: Option<f64>,
}

/// Start/goal pairs drawn from the training states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomScenarios {
    pub count: usize,
    pub mu: f64,
    pub mu_hat: f64,
    pub e0: f64,
    /// Smallest start-goal distance in the goal coordinates.
    pub min_separation: f64,
    pub goal_indices: Option<Vec<usize>>,
    pub obstacles: Vec<Obstacle>,
    pub rrt: RrtParams,
    pub seed: u64,
}

impl Default for RandomScenarios {
    fn default() -> Self {
        RandomScenarios {
            count: 10,
            mu: 0.2,
            mu_hat: 1.0,
            e0: 0.0,
            min_separation: 0.5,
            goal_indices: None,
            obstacles: vec![],
            rrt: RrtParams::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub list: Vec<Scenario>,
    pub random: Option<RandomScenarios>,
    /// Every scenario is planned once per mode.
    pub modes: Vec<ErrorMode>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            list: vec![],
            random: None,
            modes: vec![ErrorMode::Lmtcd],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecuteConfig {
    pub rollout: RolloutParams,
    /// Rollouts per feasible plan; all but the first start from a random
    /// offset inside the initial energy level set.
    pub trials_per_plan: usize,
    pub seed: u64,
}

impl Default for ExecuteConfig {
    fn default() -> Self {
        ExecuteConfig {
            rollout: RolloutParams::default(),
            trials_per_plan: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub system: String,
    /// Added to every component seed.
    pub seed: u64,
    /// Output root, relative to `$CCMPLAN_OUT` when that is set.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub injected_error: Option<InjectedError>,
    pub model: ModelSource,
    pub train_dyn: TrainConfig,
    pub ccm: CcmConfig,
    pub train_ccm: TrainConfig,
    pub certify: CertifyParams,
    pub domain: DomainConfig,
    pub scenarios: ScenarioConfig,
    pub execute: ExecuteConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            system: "linear".into(),
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            injected_error: None,
            model: ModelSource::Learned,
            train_dyn: TrainConfig::default(),
            ccm: CcmConfig::default(),
            train_ccm: TrainConfig::default(),
            certify: CertifyParams::default(),
            domain: DomainConfig::default(),
            scenarios: ScenarioConfig::default(),
            execute: ExecuteConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads `path` and applies `key=value` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: PipelineConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.system_spec()?;
        self.train_dyn.validate()?;
        self.train_ccm.validate()?;
        if self.data.n_train < 2 {
            return Err(Error::Config("data.n_train must be at least 2".into()));
        }
        let r = &self.certify.rho;
        for v in [r.l_hg, r.lam_max_m, r.lam_min_m, r.delta_u, r.lam_ccm] {
            if !(v > 0.5 && v < 1.0) {
                return Err(Error::Config(format!("every rho must lie in (0.5, 1), got {v}")));
            }
        }
        if let Some(q) = self.domain.outlier_quantile {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config("outlier_quantile must lie in (0, 1]".into()));
            }
        }
        if self.scenarios.modes.is_empty() {
            return Err(Error::Config("scenarios.modes must not be empty".into()));
        }
        let linear_only = self.model == ModelSource::ExactLinear || self.ccm.source == CcmSource::Lyapunov;
        if linear_only && self.system != "linear" {
            return Err(Error::Config(
                "exact-linear models and Lyapunov metrics need the linear system".into(),
            ));
        }
        Ok(())
    }

    /// The benchmark system with the configured boxes and injected error.
    pub fn system_spec(&self) -> Result<SystemSpec> {
        let mut sys = SystemSpec::by_name(&self.system)?;
        if let Some(b) = &self.data.state_box {
            sys.state_box = b.clone();
        }
        if let Some(b) = &self.data.control_box {
            sys.control_box = b.clone();
        }
        sys.injected_error = self.injected_error.clone();
        sys.validate()?;
        Ok(sys)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    pub fn seed_for(&self, component: u64) -> u64 {
        component.wrapping_add(self.seed)
    }
}

/// `a.b.c=value`; the value is parsed as TOML when possible and taken as a
/// string otherwise.
pub fn apply_override(tree: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut table = tree;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = PipelineConfig::parse(
            "system = \"linear\"\n[data]\nn_train = 50\n",
            &[
                "data.n_train=70".into(),
                "certify.evt.n_b=40".into(),
                "out_dir=elsewhere".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.data.n_train, 70);
        assert_eq!(cfg.certify.evt.n_b, 40);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn unknown_keys_and_bad_rho_rejected() {
        assert!(PipelineConfig::parse("colour = 3\n", &[]).is_err());
        assert!(PipelineConfig::parse("", &["certify.rho.l_hg=0.4".into()]).is_err());
        assert!(PipelineConfig::parse("", &["nonsense".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
