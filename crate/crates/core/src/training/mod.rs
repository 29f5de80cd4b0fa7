//! Two-stage learning: the dynamics model first, then the metric (and, in
//! weak mode, the controller) with the dynamics frozen.

pub mod ccm;
pub mod loss;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use ccm::{contraction_matrix, CcmBundle, CcmMode, CcmPoint};
pub use loss::{ccm_loss, ccm_loss_grad, dyn_loss, dyn_loss_grad, logb, CcmLossParts, CcmWeights, DynLossParts};

use crate::error::{Error, Result};
use crate::models::{ControlAffineModel, Dataset, Sample};

/// Linear ramp from `start` to `end` over `ramp_epochs`, constant after.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub start: f64,
    pub end: f64,
    pub ramp_epochs: usize,
}

impl Schedule {
    pub fn constant(v: f64) -> Self {
        Schedule {
            start: v,
            end: v,
            ramp_epochs: 0,
        }
    }

    pub fn value(&self, epoch: usize) -> f64 {
        if self.ramp_epochs == 0 || epoch >= self.ramp_epochs {
            return self.end;
        }
        self.start + (self.end - self.start) * epoch as f64 / self.ramp_epochs as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    /// Gradient norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub alpha1: Schedule,
    pub alpha2: Schedule,
    pub alpha3: Schedule,
    /// Target contraction rate λ (1/s).
    pub lam: f64,
    /// Metric eigenvalue floor w̲.
    pub w_floor: f64,
    pub barrier_margin: f64,
    /// Held-out fraction for the dynamics validation MSE.
    pub val_fraction: f64,
    /// Radius of the deviation ball x̃ is drawn from in weak-mode training.
    pub eps_train: f64,
    /// Radius of the ball strong-mode training states are jittered in; 0
    /// trains on the data states themselves.
    pub state_jitter: f64,
    pub f_hidden: Vec<usize>,
    pub b_hidden: Vec<usize>,
    pub metric_hidden: Vec<usize>,
    pub controller_hidden: Vec<usize>,
    pub controller_gain: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 100,
            lr: 1e-3,
            lr_decay: 1.0,
            grad_clip: 0.0,
            alpha1: Schedule::constant(0.0),
            alpha2: Schedule::constant(0.0),
            alpha3: Schedule::constant(0.0),
            lam: 0.5,
            w_floor: 0.01,
            barrier_margin: 1e-3,
            val_fraction: 0.1,
            eps_train: 0.1,
            state_jitter: 0.0,
            f_hidden: vec![64],
            b_hidden: vec![16],
            metric_hidden: vec![32, 32],
            controller_hidden: vec![32],
            controller_gain: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if !(self.lam > 0.0) {
            return Err(Error::Config("lam must be positive".into()));
        }
        if !(self.w_floor > 0.0) || !(self.barrier_margin > 0.0) {
            return Err(Error::Config("w_floor and barrier_margin must be positive".into()));
        }
        for (name, s) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
        ] {
            if s.end < s.start || s.start < 0.0 {
                return Err(Error::Config(format!(
                    "{name} schedule must be non-negative and non-decreasing"
                )));
            }
        }
        if !(self.state_jitter >= 0.0) || !(self.eps_train >= 0.0) {
            return Err(Error::Config("state_jitter and eps_train must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam with β = (0.9, 0.999).
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grads[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grads[i] * grads[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn clip(grads: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let n = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm {
        for g in grads.iter_mut() {
            *g *= max_norm / n;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub lipschitz: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcmEpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Largest `λ̄(C)` seen in any batch this epoch.
    pub nsd: f64,
    pub opt: f64,
    pub gain: f64,
}

fn mse_of(g: &ControlAffineModel, samples: &[&Sample]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let p = g.params();
    samples
        .iter()
        .map(|s| {
            let pred = g.eval_with(&p, &s.x, &s.u);
            pred.iter().zip(&s.dx).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / samples.len() as f64
}

/// Fits `g` to the dataset. Entry 0 of the history is the untrained model.
pub fn train_dynamics(g: &mut ControlAffineModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<DynEpochLog>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::invalid("dynamics training needs at least 2 samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = ((data.len() as f64) * cfg.val_fraction).floor() as usize;
    let n_val = n_val.min(data.len() - 2);
    let (val_idx, train_idx) = idx.split_at(n_val);
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &data.samples[i]).collect();
    let mut train_idx = train_idx.to_vec();
    let train_refs = |ids: &[usize]| -> Vec<&Sample> { ids.iter().map(|&i| &data.samples[i]).collect() };

    let all_train = train_refs(&train_idx);
    let initial = mse_of(g, &all_train);
    let mut history = vec![DynEpochLog {
        epoch: 0,
        loss: initial,
        mse: initial,
        lipschitz: 0.0,
        val_mse: if val.is_empty() { initial } else { mse_of(g, &val) },
    }];

    let mut params = g.params();
    let mut opt = Adam::new(params.len(), cfg.lr);
    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let alpha1 = cfg.alpha1.value(epoch - 1);
        let (mut loss, mut mse, mut lip, mut nb) = (0.0, 0.0, 0.0f64, 0usize);
        for chunk in train_idx.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = train_refs(chunk);
            let (parts, mut grads) = dyn_loss_grad(g, &batch, alpha1)?;
            if !parts.total.is_finite() || grads.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            clip(&mut grads, cfg.grad_clip);
            opt.step(&mut params, &grads);
            g.set_params(&params).map_err(|_| Error::TrainingDiverged { epoch })?;
            loss += parts.total;
            mse += parts.mse;
            lip = lip.max(parts.lipschitz);
            nb += 1;
        }
        opt.set_lr(opt.lr() * cfg.lr_decay);
        let nb = nb.max(1) as f64;
        let val_mse = if val.is_empty() { mse / nb } else { mse_of(g, &val) };
        if !val_mse.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log::debug!("dyn epoch {epoch}: loss {:.3e} val_mse {val_mse:.3e}", loss / nb);
        history.push(DynEpochLog {
            epoch,
            loss: loss / nb,
            mse: mse / nb,
            lipschitz: lip,
            val_mse,
        });
    }
    Ok(history)
}

/// Uniform sample from the Euclidean ball of radius `r` in `R^n`.
pub fn uniform_in_ball<R: Rng>(rng: &mut R, n: usize, r: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let radius = r * rng.random::<f64>().powf(1.0 / n as f64);
    dir.into_iter().map(|v| v * radius / norm).collect()
}

/// Training points for the contraction condition drawn from the data.
pub fn ccm_points<R: Rng>(mode: CcmMode, data: &Dataset, eps: f64, jitter: f64, rng: &mut R) -> Vec<CcmPoint> {
    data.samples
        .iter()
        .map(|s| match mode {
            CcmMode::Strong if jitter > 0.0 => {
                let d = uniform_in_ball(rng, s.x.len(), jitter);
                CcmPoint::Strong {
                    x: s.x.iter().zip(d).map(|(a, b)| a + b).collect(),
                }
            }
            CcmMode::Strong => CcmPoint::Strong { x: s.x.clone() },
            CcmMode::Weak => CcmPoint::Weak {
                x_tilde: uniform_in_ball(rng, s.x.len(), eps),
                x_star: s.x.clone(),
                u_star: s.u.clone(),
            },
        })
        .collect()
}

/// Trains the bundle with `g` frozen.
pub fn train_ccm(
    bundle: &mut CcmBundle,
    g: &ControlAffineModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<CcmEpochLog>> {
    cfg.validate()?;
    bundle.validate(g)?;
    if data.is_empty() {
        return Err(Error::invalid("CCM training needs data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut params = bundle.params();
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut points = ccm_points(bundle.mode, data, cfg.eps_train, cfg.state_jitter, &mut rng);
        points.shuffle(&mut rng);
        let weights = CcmWeights {
            alpha2: cfg.alpha2.value(epoch - 1),
            alpha3: cfg.alpha3.value(epoch - 1),
            margin: cfg.barrier_margin,
        };
        let (mut loss, mut nsd, mut optv, mut gain, mut nb) = (0.0, f64::NEG_INFINITY, 0.0, 0.0, 0usize);
        for batch in points.chunks(cfg.batch_size) {
            let (parts, mut grads) = ccm_loss_grad(bundle, g, batch, &weights)?;
            if !parts.total.is_finite() || grads.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            clip(&mut grads, cfg.grad_clip);
            opt.step(&mut params, &grads);
            bundle
                .set_params(&params)
                .map_err(|_| Error::TrainingDiverged { epoch })?;
            loss += parts.total;
            nsd = nsd.max(parts.nsd);
            optv += parts.opt;
            gain = parts.gain;
            nb += 1;
        }
        opt.set_lr(opt.lr() * cfg.lr_decay);
        let nb = nb.max(1) as f64;
        log::debug!("ccm epoch {epoch}: loss {:.3e} max λ̄(C) {nsd:.3e}", loss / nb);
        history.push(CcmEpochLog {
            epoch,
            loss: loss / nb,
            nsd,
            opt: optv / nb,
            gain,
        });
    }
    Ok(history)
}

pub fn write_dyn_log(path: &Path, history: &[DynEpochLog]) -> Result<()> {
    write_log(path, history)
}

pub fn write_ccm_log(path: &Path, history: &[CcmEpochLog]) -> Result<()> {
    write_log(path, history)
}

fn write_log<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_ramps_and_holds() {
        let s = Schedule {
            start: 0.0,
            end: 10.0,
            ramp_epochs: 5,
        };
        assert_eq!(s.value(0), 0.0);
        assert_eq!(s.value(2), 4.0);
        assert_eq!(s.value(5), 10.0);
        assert_eq!(s.value(50), 10.0);
    }

    #[test]
    fn decreasing_schedule_rejected() {
        let cfg = TrainConfig {
            alpha2: Schedule {
                start: 1.0,
                end: 0.5,
                ramp_epochs: 3,
            },
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn ball_samples_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let v = uniform_in_ball(&mut rng, 4, 0.3);
            assert!(v.iter().map(|x| x * x).sum::<f64>().sqrt() <= 0.3 + 1e-12);
        }
    }
}
