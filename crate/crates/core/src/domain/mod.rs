//! The trusted domain `D`: a union of `r`-balls around training
//! state-control pairs, with exact nearest-data queries.

pub mod select;
pub mod vptree;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use select::{select_radius, RadiusDiagnostics, RadiusParams};
pub use vptree::VpTree;

use crate::error::{Error, Result};
use crate::num::mat::dist_f64;

/// Points that can be drawn i.i.d. from some set.
pub trait PointSampler: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>>;
}

/// Union of equal-radius balls. Sampling is exactly uniform over the union.
#[derive(Clone, Debug)]
pub struct BallUnion {
    tree: VpTree,
    radius: f64,
    /// Bounding box of the union.
    bounds: Vec<(f64, f64)>,
    /// Sample through the bounding box rather than through the balls.
    use_box: bool,
}

impl BallUnion {
    pub fn new(centers: Vec<Vec<f64>>, radius: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::DomainConstruction("no ball centers".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::DomainConstruction(format!(
                "radius must be positive, got {radius}"
            )));
        }
        let n = centers.len();
        let dim = centers[0].len();
        let bounds = (0..dim)
            .map(|i| {
                let lo = centers.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
                let hi = centers.iter().map(|c| c[i]).fold(f64::NEG_INFINITY, f64::max);
                (lo - radius, hi + radius)
            })
            .collect();
        let mut u = BallUnion {
            tree: VpTree::new(centers, vec![0.0; n]),
            radius,
            bounds,
            use_box: false,
        };
        u.use_box = u.box_is_cheaper();
        Ok(u)
    }

    /// Compares expected tries per sample: the mean covering count for the
    /// ball method against the inverse hit rate of the bounding box.
    fn box_is_cheaper(&self) -> bool {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
        let probes = 200;
        let centers = self.centers();
        let coverage: f64 = (0..probes)
            .map(|_| {
                let c = &centers[rng.random_range(0..centers.len())];
                self.covering_count(&uniform_in_ball(&mut rng, c, self.radius)) as f64
            })
            .sum::<f64>()
            / probes as f64;
        let hits = (0..probes).filter(|_| self.contains(&self.box_point(&mut rng))).count();
        hits > 0 && (probes as f64 / hits as f64) < coverage
    }

    fn box_point(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.bounds
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        self.tree.points()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        self.tree.nearest(z, None).is_some_and(|(d, _)| d <= self.radius)
    }

    pub fn covering_count(&self, z: &[f64]) -> usize {
        self.tree.count_within(z, self.radius)
    }
}

pub(crate) fn uniform_in_ball(rng: &mut dyn rand::RngCore, center: &[f64], r: f64) -> Vec<f64> {
    let n = center.len();
    let dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let rad = r * rng.random::<f64>().powf(1.0 / n as f64);
    center.iter().zip(&dir).map(|(c, d)| c + d * rad / norm).collect()
}

impl PointSampler for BallUnion {
    fn dim(&self) -> usize {
        self.centers()[0].len()
    }

    /// Either rejection from the bounding box, or: pick a center uniformly,
    /// a uniform point in its ball, and accept with probability
    /// `1 / #covering balls`. Both are exactly uniform on the union.
    fn sample(&self, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        let centers = self.centers();
        if self.use_box {
            for _ in 0..100_000 {
                let z = self.box_point(rng);
                if self.contains(&z) {
                    return Ok(z);
                }
            }
            return Err(Error::Sampler(
                "bounding-box rejection sampler exhausted its budget".into(),
            ));
        }
        for _ in 0..100_000 {
            let c = &centers[rng.random_range(0..centers.len())];
            let z = uniform_in_ball(rng, c, self.radius);
            let k = self.covering_count(&z).max(1);
            if k == 1 || rng.random::<f64>() * (k as f64) < 1.0 {
                return Ok(z);
            }
        }
        Err(Error::Sampler(
            "union-of-balls rejection sampler exhausted its budget".into(),
        ))
    }
}

/// Axis-aligned box sampler.
#[derive(Clone, Debug)]
pub struct BoxSampler(pub Vec<(f64, f64)>);

impl PointSampler for BoxSampler {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        Ok(self
            .0
            .iter()
            .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct TrustedDomain {
    n_x: usize,
    /// State-control points indexed with their training errors as weights.
    tree: VpTree,
    radius: f64,
    full: BallUnion,
    states: BallUnion,
}

impl TrustedDomain {
    pub fn new(points: Vec<Vec<f64>>, errors: Vec<f64>, radius: f64, n_x: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DomainConstruction("no training points".into()));
        }
        if points.len() != errors.len() {
            return Err(Error::dim(points.len(), errors.len(), "training errors"));
        }
        if errors.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::DomainConstruction(
                "training errors must be finite and non-negative".into(),
            ));
        }
        let dim = points[0].len();
        if n_x > dim
            || points
                .iter()
                .any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::DomainConstruction("inconsistent or non-finite points".into()));
        }
        let full = BallUnion::new(points.clone(), radius)?;
        let states = BallUnion::new(points.iter().map(|p| p[..n_x].to_vec()).collect(), radius)?;
        Ok(TrustedDomain {
            n_x,
            tree: VpTree::new(points, errors),
            radius,
            full,
            states,
        })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        self.tree.points()
    }

    pub fn errors(&self) -> &[f64] {
        self.tree.weights()
    }

    pub fn max_error(&self) -> f64 {
        self.errors().iter().cloned().fold(0.0, f64::max)
    }

    pub fn mean_error(&self) -> f64 {
        self.errors().iter().sum::<f64>() / self.len() as f64
    }

    /// The same points with a different radius.
    pub fn with_radius(&self, radius: f64) -> Result<Self> {
        Self::new(self.points().to_vec(), self.errors().to_vec(), radius, self.n_x)
    }

    /// Union of `r`-balls over the whole state-control points.
    pub fn sampler(&self) -> &BallUnion {
        &self.full
    }

    /// Union of `r`-balls around the state parts, a superset of `proj_x(D)`.
    pub fn state_sampler(&self) -> &BallUnion {
        &self.states
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        self.full.contains(z)
    }

    /// `(min_i L‖z − zᵢ‖ + eᵢ, argmin)`.
    pub fn min_error_term(&self, z: &[f64], l_hg: f64) -> (f64, usize) {
        self.tree.min_cost(z, l_hg, None).expect("domain is non-empty")
    }

    /// True iff some training point lies within `r − q` of `z`, which
    /// implies the whole `q`-ball around `z` is inside `D`.
    pub fn margin_check(&self, z: &[f64], q: f64) -> bool {
        if q > self.radius || q < 0.0 {
            return false;
        }
        self.tree.nearest(z, None).is_some_and(|(d, _)| d <= self.radius - q)
    }

    /// True iff some control `u` makes `margin_check((x, u), q)` pass,
    /// namely the control of a training point within `r − q` in state.
    pub fn state_margin_check(&self, x: &[f64], q: f64) -> bool {
        if q > self.radius || q < 0.0 {
            return false;
        }
        self.states
            .tree
            .nearest(x, None)
            .is_some_and(|(d, _)| d <= self.radius - q)
    }

    /// `kept` lists the dataset rows the domain was built from, if filtered.
    pub fn write(&self, dir: &Path, dataset_ref: &Path, kept: Option<&[usize]>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("domain_errors.csv"))?;
        w.write_record(["index", "error"])?;
        for (i, e) in self.errors().iter().enumerate() {
            w.write_record([i.to_string(), format!("{e:.17e}")])?;
        }
        w.flush()?;
        let meta = DomainFile {
            dataset: dataset_ref.to_path_buf(),
            radius: self.radius,
            n_x: self.n_x,
            n_points: self.len(),
            kept: kept.map(<[usize]>::to_vec),
        };
        std::fs::write(dir.join("domain.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

/// `domain.json`: the dataset reference and radius. Per-point errors live
/// next to it in `domain_errors.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainFile {
    pub dataset: PathBuf,
    pub radius: f64,
    pub n_x: usize,
    pub n_points: usize,
    /// Indices of dataset rows kept after outlier filtering; `None` keeps all.
    #[serde(default)]
    pub kept: Option<Vec<usize>>,
}

/// Reads per-point errors written by [`TrustedDomain::write`].
pub fn read_errors(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let e: f64 = rec
            .get(1)
            .ok_or_else(|| Error::invalid("missing error column"))?
            .trim()
            .parse()
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        out.push(e);
    }
    Ok(out)
}

/// Largest edge of the Euclidean minimum spanning tree (Prim, `O(N²)`):
/// the smallest `r` whose `r`-graph is connected.
pub fn r_connect(points: &[Vec<f64>]) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid("r_connect needs at least 2 points"));
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    best[0] = 0.0;
    let mut longest = 0.0f64;
    for _ in 0..n {
        let mut u = usize::MAX;
        for i in 0..n {
            if !in_tree[i] && (u == usize::MAX || best[i] < best[u]) {
                u = i;
            }
        }
        in_tree[u] = true;
        longest = longest.max(best[u]);
        for i in 0..n {
            if !in_tree[i] {
                let d = dist_f64(&points[u], &points[i]);
                if d < best[i] {
                    best[i] = d;
                }
            }
        }
    }
    Ok(longest)
}

/// Nearest-neighbour distance of every point.
pub fn nn_distances(points: &[Vec<f64>]) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::invalid("nearest-neighbour distances need at least 2 points"));
    }
    let tree = VpTree::new(points.to_vec(), vec![0.0; points.len()]);
    Ok((0..points.len())
        .map(|i| tree.nearest(&points[i], Some(i)).expect("at least 2 points").0)
        .collect())
}

/// `max_i min_{j≠i} ‖zᵢ − zⱼ‖`.
pub fn dispersion(points: &[Vec<f64>]) -> Result<f64> {
    Ok(nn_distances(points)?.into_iter().fold(0.0, f64::max))
}

/// Indices of points whose nearest-neighbour distance is at most the
/// `quantile` of all nearest-neighbour distances.
pub fn filter_outliers(points: &[Vec<f64>], quantile: f64) -> Result<Vec<usize>> {
    let nn = nn_distances(points)?;
    let mut sorted = nn.clone();
    sorted.sort_by(f64::total_cmp);
    let k = ((quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    let cut = sorted[k];
    Ok((0..points.len()).filter(|&i| nn[i] <= cut).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn r_connect_simple() {
        assert_eq!(r_connect(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap(), 5.0);
        let line: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        assert_eq!(r_connect(&line).unwrap(), 1.0);
    }

    #[test]
    fn dispersion_grid() {
        let grid: Vec<Vec<f64>> = (0..4)
            .flat_map(|i| (0..4).map(move |j| vec![i as f64, j as f64]))
            .collect();
        assert_eq!(dispersion(&grid).unwrap(), 1.0);
    }

    #[test]
    fn single_point_error_term() {
        let d = TrustedDomain::new(vec![vec![0.0, 0.0]], vec![0.1], 1.0, 1).unwrap();
        let (v, i) = d.min_error_term(&[0.3, 0.4], 1.0);
        assert!((v - 0.6).abs() < 1e-15);
        assert_eq!(i, 0);
    }

    #[test]
    fn margin_check_edges() {
        let d = TrustedDomain::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![0.0; 2], 0.5, 1).unwrap();
        assert!(d.margin_check(&[0.0, 0.0], 0.0));
        assert!(d.margin_check(&[0.0, 0.0], 0.5));
        assert!(!d.margin_check(&[0.0, 0.0], 0.6));
        assert!(!d.margin_check(&[0.5, 0.3], 0.1));
    }

    #[test]
    fn union_sampler_stays_inside_and_is_balanced() {
        // Two heavily overlapping balls plus a distant one. Without the
        // multiplicity correction the distant ball would get a third of the draws.
        let centers = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 0.0]];
        let u = BallUnion::new(centers, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        let mut far = 0;
        for _ in 0..n {
            let z = u.sample(&mut rng).unwrap();
            assert!(u.contains(&z));
            if z[0] > 5.0 {
                far += 1;
            }
        }
        // Area of two unit discs offset by 0.1 ≈ π + 0.2; far share ≈ π / (2π + 0.2).
        let expect = std::f64::consts::PI / (2.0 * std::f64::consts::PI + 0.2);
        let got = far as f64 / n as f64;
        assert!((got - expect).abs() < 0.015, "far share {got} vs {expect}");
    }

    #[test]
    fn outlier_filter_drops_far_point() {
        let mut pts: Vec<Vec<f64>> = (0..400)
            .map(|i| vec![(i % 20) as f64 * 0.1, (i / 20) as f64 * 0.1])
            .collect();
        pts.push(vec![50.0, 50.0]);
        let kept = filter_outliers(&pts, 0.995).unwrap();
        assert!(!kept.contains(&400));
        assert_eq!(kept.len(), 400);
    }
}
