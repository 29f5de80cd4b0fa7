//! Exact vantage-point tree with per-subtree minimum weights, so that
//! `min_i (L‖z − zᵢ‖ + eᵢ)` can be answered by branch and bound.

use crate::num::mat::dist_f64;

const LEAF: usize = 8;

/// Rounding allowance on triangle-inequality bounds so pruning never drops
/// a true candidate.
fn slack(v: f64) -> f64 {
    1e-12 * (1.0 + v.abs())
}

#[derive(Clone, Debug)]
enum Node {
    Leaf(Vec<usize>),
    Split {
        vp: usize,
        /// `(lo, hi, min weight, child)`: bounds on `‖zᵢ − z_vp‖` over the child.
        kids: Vec<(f64, f64, f64, Box<Node>)>,
    },
}

#[derive(Clone, Debug)]
pub struct VpTree {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    root: Node,
}

impl VpTree {
    /// `weights` must be non-negative; pass zeros for plain nearest-neighbour use.
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Self {
        assert_eq!(points.len(), weights.len());
        let idx: Vec<usize> = (0..points.len()).collect();
        let root = build(&points, &weights, idx);
        VpTree { points, weights, root }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(min_i L‖z − zᵢ‖ + wᵢ, argmin)`, skipping `exclude`. Ties go to the
    /// smallest index so results match an exhaustive scan.
    pub fn min_cost(&self, z: &[f64], l: f64, exclude: Option<usize>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        search(&self.root, &self.points, &self.weights, z, l, exclude, &mut best);
        best
    }

    /// Nearest neighbour distance and index, skipping `exclude`.
    pub fn nearest(&self, z: &[f64], exclude: Option<usize>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        search_unweighted(&self.root, &self.points, z, exclude, &mut best);
        best
    }

    /// Number of points within distance `r` of `z` (inclusive).
    pub fn count_within(&self, z: &[f64], r: f64) -> usize {
        let mut n = 0;
        count(&self.root, &self.points, z, r, &mut n);
        n
    }
}

fn build(points: &[Vec<f64>], weights: &[f64], mut idx: Vec<usize>) -> Node {
    if idx.len() <= LEAF {
        return Node::Leaf(idx);
    }
    let vp = idx.swap_remove(0);
    let mut d: Vec<(f64, usize)> = idx.iter().map(|&i| (dist_f64(&points[i], &points[vp]), i)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mid = d.len() / 2;
    let mut kids = Vec::with_capacity(2);
    for part in [&d[..mid], &d[mid..]] {
        if part.is_empty() {
            continue;
        }
        let lo = part.first().unwrap().0;
        let hi = part.last().unwrap().0;
        let ids: Vec<usize> = part.iter().map(|p| p.1).collect();
        let wmin = ids.iter().map(|&i| weights[i]).fold(f64::INFINITY, f64::min);
        kids.push((lo, hi, wmin, Box::new(build(points, weights, ids))));
    }
    Node::Split { vp, kids }
}

fn better(cand: (f64, usize), best: &Option<(f64, usize)>) -> bool {
    match best {
        None => true,
        Some((v, i)) => cand.0 < *v || (cand.0 == *v && cand.1 < *i),
    }
}

fn search(
    node: &Node,
    points: &[Vec<f64>],
    weights: &[f64],
    z: &[f64],
    l: f64,
    exclude: Option<usize>,
    best: &mut Option<(f64, usize)>,
) {
    match node {
        Node::Leaf(ids) => {
            for &i in ids {
                if Some(i) == exclude {
                    continue;
                }
                let c = (l * dist_f64(z, &points[i]) + weights[i], i);
                if better(c, best) {
                    *best = Some(c);
                }
            }
        }
        Node::Split { vp, kids } => {
            let d = dist_f64(z, &points[*vp]);
            if Some(*vp) != exclude {
                let c = (l * d + weights[*vp], *vp);
                if better(c, best) {
                    *best = Some(c);
                }
            }
            let mut order: Vec<(f64, &Node)> = kids
                .iter()
                .map(|(lo, hi, wmin, child)| {
                    let gap = (lo - d).max(d - hi).max(0.0);
                    (l * gap + wmin, child.as_ref())
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (bound, child) in order {
                // Equal bounds may still hold a smaller-index tie.
                if best.is_some_and(|(v, _)| bound - slack(bound) > v) {
                    continue;
                }
                search(child, points, weights, z, l, exclude, best);
            }
        }
    }
}

fn search_unweighted(
    node: &Node,
    points: &[Vec<f64>],
    z: &[f64],
    exclude: Option<usize>,
    best: &mut Option<(f64, usize)>,
) {
    match node {
        Node::Leaf(ids) => {
            for &i in ids {
                if Some(i) == exclude {
                    continue;
                }
                let c = (dist_f64(z, &points[i]), i);
                if better(c, best) {
                    *best = Some(c);
                }
            }
        }
        Node::Split { vp, kids } => {
            let d = dist_f64(z, &points[*vp]);
            if Some(*vp) != exclude && better((d, *vp), best) {
                *best = Some((d, *vp));
            }
            let mut order: Vec<(f64, &Node)> = kids
                .iter()
                .map(|(lo, hi, _, child)| ((lo - d).max(d - hi).max(0.0), child.as_ref()))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (bound, child) in order {
                if best.is_some_and(|(v, _)| bound - slack(bound) > v) {
                    continue;
                }
                search_unweighted(child, points, z, exclude, best);
            }
        }
    }
}

fn count(node: &Node, points: &[Vec<f64>], z: &[f64], r: f64, n: &mut usize) {
    match node {
        Node::Leaf(ids) => *n += ids.iter().filter(|&&i| dist_f64(z, &points[i]) <= r).count(),
        Node::Split { vp, kids } => {
            let d = dist_f64(z, &points[*vp]);
            if d <= r {
                *n += 1;
            }
            for (lo, hi, _, child) in kids {
                if (lo - d).max(d - hi).max(0.0) <= r + slack(r) {
                    count(child, points, z, r, n);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = cloud(&mut rng, 500, 3);
        let w: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..0.3)).collect();
        let tree = VpTree::new(pts.clone(), w.clone());
        for _ in 0..200 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let l = rng.random_range(0.0..3.0);
            let brute = (0..500)
                .map(|i| (l * dist_f64(&z, &pts[i]) + w[i], i))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap();
            assert_eq!(tree.min_cost(&z, l, None).unwrap(), brute);
            let r = rng.random_range(0.0..1.0);
            let n = pts.iter().filter(|p| dist_f64(&z, p) <= r).count();
            assert_eq!(tree.count_within(&z, r), n);
        }
    }

    #[test]
    fn nearest_skips_excluded() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        let tree = VpTree::new(pts, vec![0.0; 3]);
        assert_eq!(tree.nearest(&[0.0], Some(0)), Some((1.0, 1)));
        assert_eq!(tree.nearest(&[0.0], None), Some((0.0, 0)));
    }
}
