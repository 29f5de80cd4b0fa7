//! Extreme-value estimation of a supremum: batch maxima, a reverse-Weibull
//! fit, and a Kolmogorov-Smirnov check of the fit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::domain::PointSampler;
use crate::error::{Error, Result};

/// Reverse Weibull: `F(s) = exp(−((γ − s)/σ)^k)` for `s < γ`, 1 above.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeibullFit {
    pub location: f64,
    pub scale: f64,
    pub shape: f64,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    /// Standard deviation of the location from the profile-likelihood
    /// curvature; NaN when the curvature is not usable.
    pub location_sd: f64,
}

impl WeibullFit {
    pub fn cdf(&self, s: f64) -> f64 {
        if s >= self.location {
            1.0
        } else {
            (-((self.location - s) / self.scale).powf(self.shape)).exp()
        }
    }

    /// Normal-approximation half-width at two-sided confidence `rho`.
    pub fn location_ci_halfwidth(&self, rho: f64) -> f64 {
        if !self.location_sd.is_finite() {
            return f64::NAN;
        }
        normal_quantile(0.5 * (1.0 + rho)) * self.location_sd
    }
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvtParams {
    /// Number of batches `N_s`.
    pub n_s: usize,
    /// Batch size `N_b`.
    pub n_b: usize,
    /// How often `N_b` is doubled after a failed KS test before refusing.
    pub max_doublings: usize,
    pub seed: u64,
}

impl Default for EvtParams {
    fn default() -> Self {
        EvtParams {
            n_s: 50,
            n_b: 200,
            max_doublings: 3,
            seed: 0,
        }
    }
}

/// `N_s` maxima of `N_b` draws of `draw`. Batch `j` uses its own ChaCha
/// stream, so results do not depend on thread scheduling.
pub fn batch_maxima_with<F>(n_s: usize, n_b: usize, seed: u64, draw: F) -> Result<Vec<f64>>
where
    F: Fn(&mut ChaCha8Rng) -> Result<f64> + Sync,
{
    if n_s < 30 || n_b < 10 {
        return Err(Error::invalid(format!(
            "batch maxima need N_s ≥ 30 and N_b ≥ 10, got {n_s} and {n_b}"
        )));
    }
    (0..n_s)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64 + 1);
            let mut best = f64::NEG_INFINITY;
            for _ in 0..n_b {
                let v = draw(&mut rng)?;
                if v.is_nan() {
                    return Err(Error::invalid("η evaluated to NaN"));
                }
                best = best.max(v);
            }
            Ok(best)
        })
        .collect()
}

/// `batch_maxima_with` for `η(z)` with `z` drawn from `sampler`.
pub fn batch_maxima<S, E>(sampler: &S, eta: E, n_s: usize, n_b: usize, seed: u64) -> Result<Vec<f64>>
where
    S: PointSampler + ?Sized,
    E: Fn(&[f64]) -> f64 + Sync,
{
    batch_maxima_with(n_s, n_b, seed, |rng| Ok(eta(&sampler.sample(rng)?)))
}

/// Shape MLE for a standard two-parameter Weibull on `y > 0` (scaled to
/// `max y = 1`), restricted to `k ∈ [K_MIN, K_MAX]`.
const K_MIN: f64 = 1.0;
const K_MAX: f64 = 1e3;

fn shape_mle(ln_y: &[f64]) -> f64 {
    let n = ln_y.len() as f64;
    let mean_ln = ln_y.iter().sum::<f64>() / n;
    // h(k) = Σ y^k ln y / Σ y^k − 1/k − mean ln y is increasing in k.
    let h = |k: f64| {
        let (mut a, mut b) = (0.0, 0.0);
        for &l in ln_y {
            let w = (k * l).exp();
            a += w * l;
            b += w;
        }
        a / b - 1.0 / k - mean_ln
    };
    if h(K_MIN) >= 0.0 {
        return K_MIN;
    }
    if h(K_MAX) <= 0.0 {
        return K_MAX;
    }
    let (mut lo, mut hi) = (K_MIN.ln(), K_MAX.ln());
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if h(mid.exp()) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Profile log-likelihood at location `gamma`, with `(σ, k)` at their MLE.
fn profile(samples: &[f64], gamma: f64) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let y: Vec<f64> = samples.iter().map(|s| gamma - s).collect();
    let ymax = y.iter().cloned().fold(0.0, f64::max);
    let ln_y: Vec<f64> = y.iter().map(|v| (v / ymax).ln()).collect();
    let k = shape_mle(&ln_y);
    let mean_yk = ln_y.iter().map(|l| (k * l).exp()).sum::<f64>() / n;
    // σ in scaled units, then unscaled.
    let sigma = mean_yk.powf(1.0 / k) * ymax;
    let sum_ln_y: f64 = y.iter().map(|v| v.ln()).sum();
    let ll = n * k.ln() - n * k * sigma.ln() + (k - 1.0) * sum_ln_y - n;
    (ll, sigma, k)
}

/// Reverse-Weibull MLE via the profile likelihood over the location.
pub fn weibull_fit(samples: &[f64]) -> Result<WeibullFit> {
    if samples.len() < 30 {
        return Err(Error::invalid(format!(
            "Weibull fit needs at least 30 maxima, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite maxima"));
    }
    let smax = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let smin = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let range = smax - smin;
    if range <= 1e-12 * (1.0 + smax.abs()) {
        return Err(Error::Degenerate("all batch maxima are equal".into()));
    }
    // Search ln δ with δ = γ − s_max over [1e-6, 1e2]·range.
    let ll_at = |t: f64| profile(samples, smax + range * t.exp()).0;
    let (t_lo, t_hi) = ((1e-6f64).ln(), (1e2f64).ln());
    let grid = 120;
    let mut best_t = t_lo;
    let mut best_ll = f64::NEG_INFINITY;
    for i in 0..=grid {
        let t = t_lo + (t_hi - t_lo) * i as f64 / grid as f64;
        let ll = ll_at(t);
        if ll > best_ll {
            best_ll = ll;
            best_t = t;
        }
    }
    // Golden-section refinement around the best grid point.
    let step = (t_hi - t_lo) / grid as f64;
    let (mut a, mut b) = ((best_t - step).max(t_lo), (best_t + step).min(t_hi));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - phi * (b - a), a + phi * (b - a));
    let (mut fc, mut fd) = (ll_at(c), ll_at(d));
    for _ in 0..80 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = ll_at(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = ll_at(d);
        }
    }
    let t_hat = if fc > best_ll.max(fd) {
        c
    } else if fd > best_ll {
        d
    } else {
        best_t
    };
    let gamma = smax + range * t_hat.exp();
    let (ll, scale, shape) = profile(samples, gamma);
    if !(ll.is_finite() && scale > 0.0 && shape > 0.0) {
        return Err(Error::FitFailed("reverse-Weibull likelihood did not converge".into()));
    }
    // Curvature of the profile likelihood in γ gives Var(γ̂).
    let interior = t_hat > t_lo + step && t_hat < t_hi - step;
    let location_sd = if interior {
        let h = 0.05 * (gamma - smax);
        let f = |g: f64| profile(samples, g).0;
        let curv = (f(gamma + h) - 2.0 * ll + f(gamma - h)) / (h * h);
        if curv < 0.0 {
            (-1.0 / curv).sqrt()
        } else {
            f64::NAN
        }
    } else {
        f64::NAN
    };
    let mut fit = WeibullFit {
        location: gamma,
        scale,
        shape,
        ks_statistic: f64::NAN,
        ks_p_value: f64::NAN,
        location_sd,
    };
    let (d, p, _) = ks_test(samples, &fit);
    fit.ks_statistic = d;
    fit.ks_p_value = p;
    Ok(fit)
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{j−1} e^{−2j²λ²}`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test against the fitted CDF. Returns `(D, p, p ≥ 0.05)`.
pub fn ks_test(samples: &[f64], fit: &WeibullFit) -> (f64, f64, bool) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, &v) in s.iter().enumerate() {
        let f = fit.cdf(v);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    let sn = n.sqrt();
    let p = kolmogorov_q((sn + 0.12 + 0.11 / sn) * d);
    (d, p, p >= 0.05)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeEstimate {
    /// Upper estimate of the supremum, valid with probability `rho`.
    pub value: f64,
    pub rho: f64,
    /// `None` when every batch maximum was equal (the value is that maximum).
    pub fit: Option<WeibullFit>,
    pub n_s: usize,
    pub n_b: usize,
    pub max_sample: f64,
}

/// Certified upper value from a fit: the larger of the location plus its
/// confidence half-width and the endpoint bound implied by the fitted tail,
/// `s_max + σ(−ln(1−ρ)/N_s)^{1/k}`.
pub fn upper_value(fit: &WeibullFit, max_sample: f64, n_s: usize, rho: f64) -> f64 {
    let tail = max_sample + fit.scale * (-(1.0 - rho).ln() / n_s as f64).powf(1.0 / fit.shape);
    let ci = fit.location + fit.location_ci_halfwidth(rho);
    if ci.is_finite() {
        ci.max(tail)
    } else {
        tail.max(fit.location)
    }
}

/// Batch maxima, fit and KS test; doubles `N_b` after a failed test up to
/// `max_doublings` times before refusing.
pub fn extreme_estimate<F>(draw: F, rho: f64, params: &EvtParams) -> Result<ExtremeEstimate>
where
    F: Fn(&mut ChaCha8Rng) -> Result<f64> + Sync,
{
    if !(rho > 0.5 && rho < 1.0) {
        return Err(Error::Config(format!("rho must lie in (0.5, 1), got {rho}")));
    }
    let mut n_b = params.n_b;
    let mut last = (f64::NAN, f64::NAN);
    for attempt in 0..=params.max_doublings {
        let maxima = batch_maxima_with(params.n_s, n_b, params.seed.wrapping_add(attempt as u64), &draw)?;
        let smax = maxima.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        match weibull_fit(&maxima) {
            Err(Error::Degenerate(_)) => {
                return Ok(ExtremeEstimate {
                    value: smax,
                    rho,
                    fit: None,
                    n_s: params.n_s,
                    n_b,
                    max_sample: smax,
                })
            }
            Ok(fit) if fit.ks_p_value >= 0.05 => {
                log::debug!(
                    "fit at N_b = {n_b}: location {:.4e} ± {:.2e}, scale {:.3e}, shape {:.3}, max {smax:.4e}",
                    fit.location,
                    fit.location_sd,
                    fit.scale,
                    fit.shape
                );
                return Ok(ExtremeEstimate {
                    value: upper_value(&fit, smax, params.n_s, rho),
                    rho,
                    fit: Some(fit),
                    n_s: params.n_s,
                    n_b,
                    max_sample: smax,
                });
            }
            Ok(fit) => {
                log::warn!(
                    "KS test failed (D = {:.3}, p = {:.3}) at N_b = {n_b}",
                    fit.ks_statistic,
                    fit.ks_p_value
                );
                last = (fit.ks_statistic, fit.ks_p_value);
            }
            Err(Error::FitFailed(msg)) => log::warn!("Weibull fit failed at N_b = {n_b}: {msg}"),
            Err(e) => return Err(e),
        }
        n_b *= 2;
    }
    Err(Error::CertificationRefused {
        statistic: last.0,
        p_value: last.1,
        batch_size: n_b / 2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn reverse_weibull(rng: &mut impl Rng, gamma: f64, scale: f64, shape: f64) -> f64 {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        gamma - scale * (-u.ln()).powf(1.0 / shape)
    }

    #[test]
    fn recovers_synthetic_location() {
        let mut inside = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..200).map(|_| reverse_weibull(&mut rng, 1.0, 0.5, 2.0)).collect();
            let fit = weibull_fit(&s).unwrap();
            let smax = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(fit.location >= smax);
            if (0.95..=1.1).contains(&fit.location) {
                inside += 1;
            }
        }
        assert!(inside >= 16, "{inside}/20 fits in range");
    }

    #[test]
    fn equal_samples_are_degenerate() {
        assert!(matches!(weibull_fit(&[2.0; 40]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ks_calibration() {
        let truth = WeibullFit {
            location: 1.0,
            scale: 0.5,
            shape: 2.0,
            ks_statistic: 0.0,
            ks_p_value: 0.0,
            location_sd: f64::NAN,
        };
        let mut pass = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..100).map(|_| reverse_weibull(&mut rng, 1.0, 0.5, 2.0)).collect();
            if ks_test(&s, &truth).2 {
                pass += 1;
            }
        }
        assert!(pass >= 90, "{pass}/100");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let far: Vec<f64> = (0..100).map(|_| rng.random_range(5.0..6.0)).collect();
        assert!(!ks_test(&far, &truth).2);
        let point = vec![1.0 - 1e-9; 50];
        assert!(ks_test(&point, &truth).0 > 0.99);
    }

    #[test]
    fn constant_eta_returns_constant() {
        let est = extreme_estimate(|_| Ok(3.5), 0.975, &EvtParams::default()).unwrap();
        assert_eq!(est.value, 3.5);
        assert!(est.fit.is_none());
    }

    #[test]
    fn maxima_of_uniform_follow_beta() {
        // max of N_b uniforms is Beta(N_b, 1) with mean N_b/(N_b+1).
        let m = batch_maxima_with(200, 50, 1, |rng| Ok(rng.random::<f64>())).unwrap();
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        assert!((mean - 50.0 / 51.0).abs() < 0.005);
        let again = batch_maxima_with(200, 50, 1, |rng| Ok(rng.random::<f64>())).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn estimate_monotone_in_rho() {
        let draw = |rng: &mut ChaCha8Rng| Ok(rng.random::<f64>().sqrt() * rng.random::<f64>().sqrt());
        let p = EvtParams::default();
        let lo = extreme_estimate(draw, 0.9, &p).unwrap().value;
        let hi = extreme_estimate(draw, 0.99, &p).unwrap().value;
        assert!(hi >= lo);
    }
}
