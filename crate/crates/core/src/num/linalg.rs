//! Symmetric eigendecomposition (cyclic Jacobi) and singular values
//! (one-sided Jacobi).

use serde::{Deserialize, Serialize};

use super::mat::Mat;
use crate::error::{Error, Result};

/// A finite, symmetric square matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mat<f64>", into = "Mat<f64>")]
pub struct SymMatrix(Mat<f64>);

impl SymMatrix {
    pub fn new(m: Mat<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::invalid(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if !m.is_finite() {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        let tol = 1e-12 * m.max_abs();
        let n = m.rows();
        for i in 0..n {
            for j in i + 1..n {
                if (m[(i, j)] - m[(j, i)]).abs() > tol {
                    return Err(Error::invalid(format!(
                        "matrix not symmetric at ({i},{j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        Ok(SymMatrix(m))
    }

    /// Symmetrizes `m` before wrapping it; for matrices that are symmetric up
    /// to floating-point round-off.
    pub fn from_nearly_symmetric(m: &Mat<f64>) -> Result<Self> {
        Self::new(m.symmetric_part())
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat<f64> {
        &self.0
    }

    pub fn into_mat(self) -> Mat<f64> {
        self.0
    }

    pub fn eigen(&self) -> SymEigen {
        sym_eigen(&self.0)
    }
}

impl TryFrom<Mat<f64>> for SymMatrix {
    type Error = Error;
    fn try_from(m: Mat<f64>) -> Result<Self> {
        SymMatrix::new(m)
    }
}

impl From<SymMatrix> for Mat<f64> {
    fn from(s: SymMatrix) -> Self {
        s.0
    }
}

/// Eigenvalues (ascending) with matching unit eigenvectors stored as columns.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Mat<f64>,
}

impl SymEigen {
    pub fn max_value(&self) -> f64 {
        *self.values.last().expect("empty eigen decomposition")
    }

    pub fn min_value(&self) -> f64 {
        self.values[0]
    }

    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k)
    }

    pub fn max_vector(&self) -> Vec<f64> {
        self.vector(self.values.len() - 1)
    }

    pub fn min_vector(&self) -> Vec<f64> {
        self.vector(0)
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi on the symmetric part of `a`.
pub fn sym_eigen(a: &Mat<f64>) -> SymEigen {
    assert!(a.is_square(), "eigen of non-square matrix");
    let n = a.rows();
    let mut m = a.symmetric_part();
    let mut v = Mat::<f64>::identity(n);
    let scale = m.max_abs().max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    SymEigen { values, vectors }
}

/// `(λ_min, λ_max)` of a symmetric matrix.
pub fn spectral_bounds(m: &SymMatrix) -> (f64, f64) {
    let e = m.eigen();
    (e.min_value(), e.max_value())
}

/// Checked variant of [`spectral_bounds`] for raw matrices.
pub fn spectral_bounds_checked(m: &Mat<f64>) -> Result<(f64, f64)> {
    Ok(spectral_bounds(&SymMatrix::new(m.clone())?))
}

/// Singular values in descending order (one-sided Jacobi on the columns of
/// `a` or of `aᵀ`, whichever is narrower).
pub fn singular_values(a: &Mat<f64>) -> Vec<f64> {
    let work = if a.cols() > a.rows() { a.transpose() } else { a.clone() };
    let (m, n) = (work.rows(), work.cols());
    let mut u = work;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..m {
                    alpha += u[(k, p)] * u[(k, p)];
                    beta += u[(k, q)] * u[(k, q)];
                    gamma += u[(k, p)] * u[(k, q)];
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let ukp = u[(k, p)];
                    let ukq = u[(k, q)];
                    u[(k, p)] = c * ukp - s * ukq;
                    u[(k, q)] = s * ukp + c * ukq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|k| u[(k, j)] * u[(k, j)]).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Smallest singular value above `1e-9 · σ_max`.
pub fn min_positive_singular_value(a: &Mat<f64>) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let sv = singular_values(a);
    let smax = sv.first().copied().unwrap_or(0.0);
    if !(smax > 0.0) {
        return Err(Error::Degenerate("all singular values are zero".into()));
    }
    let tol = 1e-9 * smax;
    Ok(sv.into_iter().filter(|&s| s > tol).fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> Mat<f64> {
        let a = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        a.symmetric_part()
    }

    /// Eigenvalues of a symmetric 3x3 from the trigonometric solution of the
    /// characteristic cubic.
    fn cubic_eigenvalues(a: &Mat<f64>) -> [f64; 3] {
        let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        let q = a.trace() / 3.0;
        let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = a.sub(&Mat::identity(3).scale(q)).scale(1.0 / p);
        let det_b = b[(0, 0)] * (b[(1, 1)] * b[(2, 2)] - b[(1, 2)] * b[(2, 1)])
            - b[(0, 1)] * (b[(1, 0)] * b[(2, 2)] - b[(1, 2)] * b[(2, 0)])
            + b[(0, 2)] * (b[(1, 0)] * b[(2, 1)] - b[(1, 1)] * b[(2, 0)]);
        let r = (det_b / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        let e2 = 3.0 * q - e1 - e3;
        let mut out = [e1, e2, e3];
        out.sort_by(|a, b| a.total_cmp(b));
        out
    }

    #[test]
    fn identity_bounds() {
        let m = SymMatrix::new(Mat::identity(2)).unwrap();
        assert_eq!(spectral_bounds(&m), (1.0, 1.0));
    }

    #[test]
    fn diagonal_bounds() {
        let m = SymMatrix::new(Mat::diag(&[0.01, 0.258])).unwrap();
        let (lo, hi) = spectral_bounds(&m);
        assert!((lo - 0.01).abs() < 1e-15);
        assert!((hi - 0.258).abs() < 1e-15);
    }

    #[test]
    fn random_3x3_matches_cubic_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a = random_sym(&mut rng, 3);
            let e = sym_eigen(&a);
            let oracle = cubic_eigenvalues(&a);
            let scale = a.max_abs();
            for k in 0..3 {
                assert!(
                    (e.values[k] - oracle[k]).abs() <= 1e-10 * scale.max(oracle[k].abs()),
                    "{:?} vs {:?}",
                    e.values,
                    oracle
                );
            }
        }
    }

    #[test]
    fn eigenvectors_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_sym(&mut rng, 6);
        let e = sym_eigen(&a);
        let lam = Mat::diag(&e.values);
        let back = e.vectors.matmul(&lam).matmul(&e.vectors.transpose());
        assert!(back.sub(&a).max_abs() < 1e-12);
    }

    #[test]
    fn non_symmetric_rejected() {
        let m = Mat::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(matches!(SymMatrix::new(m), Err(Error::InvalidInput(_))));
        let m = Mat::from_vec(2, 2, vec![1.0, f64::NAN, f64::NAN, 1.0]).unwrap();
        assert!(SymMatrix::new(m).is_err());
    }

    #[test]
    fn psd_construction_respects_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 2..7 {
            let a = Mat::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0));
            let eps = 0.05;
            let m = a.transpose().matmul(&a).add(&Mat::identity(n).scale(eps));
            let (lo, _) = spectral_bounds(&SymMatrix::from_nearly_symmetric(&m).unwrap());
            assert!(lo >= eps - 1e-10);
        }
    }

    #[test]
    fn singular_value_cases() {
        assert_eq!(min_positive_singular_value(&Mat::identity(2)).unwrap(), 1.0);
        let a = Mat::from_vec(2, 2, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(min_positive_singular_value(&a).unwrap(), 2.0);
        let z = Mat::<f64>::zeros(3, 2);
        assert!(matches!(min_positive_singular_value(&z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn random_4x2_singular_values_match_gram_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let a = Mat::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
            let gram = a.transpose().matmul(&a);
            let e = sym_eigen(&gram);
            let oracle = e.values[0].max(0.0).sqrt();
            let got = min_positive_singular_value(&a).unwrap();
            assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
        }
    }
}
