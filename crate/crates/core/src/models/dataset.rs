//! Labeled `(x, u, ẋ)` triples and their CSV form.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::system::SystemSpec;
use super::Dynamics;
use crate::error::{Error, Result};
use crate::num::rk4_step;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub dx: Vec<f64>,
}

impl Sample {
    /// The concatenated state-control vector `z = (x, u)`.
    pub fn z(&self) -> Vec<f64> {
        let mut z = self.x.clone();
        z.extend_from_slice(&self.u);
        z
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetRole {
    /// Training data.
    S,
    /// Fresh samples used only for estimating the error Lipschitz constant.
    Psi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_x: usize,
    pub n_u: usize,
    pub role: DatasetRole,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    UniformBox,
    PerturbedTrajectories,
}

impl Dataset {
    pub fn new(n_x: usize, n_u: usize, role: DatasetRole, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.x.len() != n_x || s.dx.len() != n_x {
                return Err(Error::dim(n_x, s.x.len(), "dataset state"));
            }
            if s.u.len() != n_u {
                return Err(Error::dim(n_u, s.u.len(), "dataset control"));
            }
            if s.x.iter().chain(&s.u).chain(&s.dx).any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite dataset entry"));
            }
        }
        Ok(Dataset {
            n_x,
            n_u,
            role,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// State-control vectors of every sample.
    pub fn points(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(Sample::z).collect()
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.x.clone()).collect()
    }

    /// `‖g(xᵢ, uᵢ) − ẋᵢ‖` per sample.
    pub fn errors<D: Dynamics + ?Sized>(&self, g: &D) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| {
                let pred = g.eval(&s.x, &s.u);
                pred.iter().zip(&s.dx).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            })
            .collect()
    }

    pub fn header(n_x: usize, n_u: usize) -> Vec<String> {
        let mut h: Vec<String> = (0..n_x).map(|i| format!("x{i}")).collect();
        h.extend((0..n_u).map(|i| format!("u{i}")));
        h.extend((0..n_x).map(|i| format!("dx{i}")));
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::header(self.n_x, self.n_u))?;
        for s in &self.samples {
            w.write_record(s.x.iter().chain(&s.u).chain(&s.dx).map(|v| format!("{v:.17e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset CSV; dimensions come from the header.
    pub fn read_csv(path: &Path, role: DatasetRole) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let n_x = header.iter().filter(|h| h.starts_with('x')).count();
        let n_u = header.iter().filter(|h| h.starts_with('u')).count();
        let expect = Self::header(n_x, n_u);
        if header.iter().ne(expect.iter().map(String::as_str)) {
            return Err(Error::invalid(format!("{}: unexpected dataset header", path.display())));
        }
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
            samples.push(Sample {
                x: vals[..n_x].to_vec(),
                u: vals[n_x..n_x + n_u].to_vec(),
                dx: vals[n_x + n_u..].to_vec(),
            });
        }
        Self::new(n_x, n_u, role, samples)
    }
}

fn uniform_in(rng: &mut impl Rng, b: &[(f64, f64)]) -> Vec<f64> {
    b.iter()
        .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
        .collect()
}

fn inside(v: &[f64], b: &[(f64, f64)]) -> bool {
    v.iter().zip(b).all(|(x, &(lo, hi))| *x >= lo && *x <= hi)
}

/// Labeled samples from the true system. `PerturbedTrajectories` rolls out
/// random piecewise-constant controls from random starts and perturbs the
/// visited state-control pairs, keeping everything inside the boxes.
pub fn generate_dataset(sys: &SystemSpec, n: usize, mode: SamplingMode, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    sys.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let label = |x: Vec<f64>, u: Vec<f64>| -> Sample {
        let dx = sys.eval(&x, &u);
        Sample { x, u, dx }
    };
    match mode {
        SamplingMode::UniformBox => {
            for _ in 0..n {
                let x = uniform_in(&mut rng, &sys.state_box);
                let u = uniform_in(&mut rng, &sys.control_box);
                samples.push(label(x, u));
            }
        }
        SamplingMode::PerturbedTrajectories => {
            let width = |b: &[(f64, f64)]| -> Vec<f64> { b.iter().map(|&(lo, hi)| 0.02 * (hi - lo)).collect() };
            let (sx, su) = (width(&sys.state_box), width(&sys.control_box));
            let dt = 0.05;
            while samples.len() < n {
                let mut x = uniform_in(&mut rng, &sys.state_box);
                let mut u = uniform_in(&mut rng, &sys.control_box);
                for step in 0..200 {
                    if step % 10 == 0 {
                        u = uniform_in(&mut rng, &sys.control_box);
                    }
                    let jitter = |v: &[f64], sd: &[f64], b: &[(f64, f64)], rng: &mut ChaCha8Rng| -> Vec<f64> {
                        v.iter()
                            .zip(sd)
                            .zip(b)
                            .map(|((&c, &s), &(lo, hi))| {
                                let d = if s > 0.0 {
                                    Normal::new(0.0, s).unwrap().sample(rng)
                                } else {
                                    0.0
                                };
                                (c + d).clamp(lo, hi)
                            })
                            .collect()
                    };
                    let xp = jitter(&x, &sx, &sys.state_box, &mut rng);
                    let up = jitter(&u, &su, &sys.control_box, &mut rng);
                    samples.push(label(xp, up));
                    if samples.len() == n {
                        break;
                    }
                    let mut field = |_t: f64, s: &[f64]| sys.eval(s, &u);
                    x = rk4_step(&mut field, 0.0, &x, dt);
                    if !inside(&x, &sys.state_box) {
                        break;
                    }
                }
            }
        }
    }
    Dataset::new(sys.n_x, sys.n_u, DatasetRole::S, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_box_gives_point() {
        let mut sys = SystemSpec::car();
        sys.state_box = vec![(1.0, 1.0), (2.0, 2.0), (0.5, 0.5), (0.7, 0.7)];
        sys.control_box = vec![(0.1, 0.1), (-0.2, -0.2)];
        let d = generate_dataset(&sys, 1, SamplingMode::UniformBox, 0).unwrap();
        assert_eq!(d.samples[0].x, vec![1.0, 2.0, 0.5, 0.7]);
        assert_eq!(d.samples[0].u, vec![0.1, -0.2]);
    }

    #[test]
    fn seeded_determinism() {
        let sys = SystemSpec::car();
        for mode in [SamplingMode::UniformBox, SamplingMode::PerturbedTrajectories] {
            let a = generate_dataset(&sys, 200, mode, 9).unwrap();
            let b = generate_dataset(&sys, 200, mode, 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn samples_inside_car_box() {
        let sys = SystemSpec::car();
        for mode in [SamplingMode::UniformBox, SamplingMode::PerturbedTrajectories] {
            let d = generate_dataset(&sys, 2000, mode, 4).unwrap();
            for s in &d.samples {
                assert!(inside(&s.x, &sys.state_box));
                assert!(inside(&s.u, &sys.control_box));
                assert_eq!(s.dx, sys.eval_true(&s.x, &s.u).unwrap());
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let sys = SystemSpec::linear();
        let d = generate_dataset(&sys, 20, SamplingMode::UniformBox, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        d.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path, DatasetRole::S).unwrap();
        assert_eq!(back, d);
    }
}
