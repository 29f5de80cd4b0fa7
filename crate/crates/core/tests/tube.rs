use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccmplan_core::domain::TrustedDomain;
use ccmplan_core::models::SystemSpec;
use ccmplan_core::num::Mat;
use ccmplan_core::pipeline::double_integrator;
use ccmplan_core::tube::{propagate, ErrorModel, FeedbackBound, TubeParams};

fn params(l_hg: f64, lam: f64, error_model: ErrorModel) -> TubeParams {
    TubeParams {
        l_hg,
        lam,
        lam_max_m: 1.8,
        lam_min_m: 0.6,
        feedback: FeedbackBound::Strong { delta_u: 0.8 },
        error_model,
    }
}

/// Grid over the car's state-control box.
fn car_domain(errors: impl Fn(usize) -> f64) -> TrustedDomain {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sys = SystemSpec::car();
    let pts: Vec<Vec<f64>> = (0..400)
        .map(|_| {
            sys.state_box
                .iter()
                .chain(&sys.control_box)
                .map(|&(lo, hi)| rng.random_range(lo..hi))
                .collect()
        })
        .collect();
    let errs = (0..pts.len()).map(errors).collect();
    TrustedDomain::new(pts, errs, 0.8, 4).unwrap()
}

fn car_schedule() -> Vec<(Vec<f64>, f64)> {
    vec![(vec![0.3, 0.2], 0.8), (vec![-0.4, -0.1], 1.2), (vec![0.0, 0.3], 0.5)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn larger_data_errors_give_larger_tubes(scale in prop::collection::vec(1.0..3.0f64, 400), e0 in 0.0..0.05f64) {
        let small = car_domain(|i| 0.01 + 0.001 * (i % 7) as f64);
        let large = car_domain(|i| (0.01 + 0.001 * (i % 7) as f64) * scale[i]);
        let p = params(0.05, 0.8, ErrorModel::Data);
        let car = SystemSpec::car();
        let x0 = [1.0, 0.0, 0.1, 0.6];
        let (_, a) = propagate(&p, Some(&small), &car, &x0, &car_schedule(), e0, |_| 0.01).unwrap();
        let (_, b) = propagate(&p, Some(&large), &car, &x0, &car_schedule(), e0, |_| 0.01).unwrap();
        prop_assert!(a.eps_bar.iter().zip(&b.eps_bar).all(|(s, l)| s <= l));
    }
}

#[test]
fn halving_the_step_barely_moves_the_tube() {
    let dom = car_domain(|i| 0.02 + 0.002 * (i % 5) as f64);
    let p = params(0.08, 0.7, ErrorModel::Data);
    let car = SystemSpec::car();
    let x0 = [1.0, 0.5, -0.2, 0.5];
    let (_, coarse) = propagate(&p, Some(&dom), &car, &x0, &car_schedule(), 0.01, |_| 0.01).unwrap();
    let (_, fine) = propagate(&p, Some(&dom), &car, &x0, &car_schedule(), 0.01, |_| 0.005).unwrap();
    for (k, t) in coarse.times.iter().enumerate() {
        let j = fine
            .times
            .iter()
            .position(|s| (s - t).abs() < 1e-9)
            .expect("coarse grid is a subset of the fine one");
        assert!((coarse.eps_bar[k] - fine.eps_bar[j]).abs() < 1e-4, "t = {t}");
    }
}

/// `ė = A e + d(t)` with `A = −λI + S`, `S` skew, `‖d‖ ≤ d̄`. With `M = I`
/// the energy `‖e‖²` satisfies the comparison inequality exactly, so every
/// rollout has to stay inside the constant-forcing tube.
#[test]
fn disturbed_rollouts_stay_inside_the_comparison_tube() {
    let (lam, dbar) = (0.6, 0.05);
    let p = TubeParams {
        l_hg: 0.0,
        lam,
        lam_max_m: 1.0,
        lam_min_m: 1.0,
        feedback: FeedbackBound::Strong { delta_u: 0.0 },
        error_model: ErrorModel::Constant(dbar),
    };
    let g = double_integrator(true).unwrap();
    let schedule = vec![(vec![0.1, 0.0], 1.5), (vec![0.0, -0.2], 1.5)];
    let e0 = 0.01;
    let (_, tube) = propagate(&p, None, &g, &[0.0; 4], &schedule, e0, |_| 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let s = Mat::from_fn(4, 4, |i, j| match (i, j) {
        (0, 1) => 0.7,
        (1, 0) => -0.7,
        (2, 3) => -0.3,
        (3, 2) => 0.3,
        (0, 3) => 0.4,
        (3, 0) => -0.4,
        _ => 0.0,
    });
    let a = s.add(&Mat::identity(4).scale(-lam));
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    };
    for _ in 0..1000 {
        let r0 = e0.sqrt() * rng.random::<f64>().sqrt();
        let mut e: Vec<f64> = unit(&mut rng).into_iter().map(|v| v * r0).collect();
        let mut d = vec![0.0; 4];
        for k in 0..tube.times.len() {
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(
                norm <= tube.eps_bar[k] + 1e-9,
                "t = {}: {norm} > {}",
                tube.times[k],
                tube.eps_bar[k]
            );
            if k + 1 == tube.times.len() {
                break;
            }
            if k % 10 == 0 {
                let mag = dbar * rng.random::<f64>().sqrt();
                d = unit(&mut rng).into_iter().map(|v| v * mag).collect();
            }
            let h = tube.times[k + 1] - tube.times[k];
            let f = |e: &[f64]| -> Vec<f64> { a.mul_vec(e).iter().zip(&d).map(|(x, y)| x + y).collect() };
            let k1 = f(&e);
            let k2 = f(&e.iter().zip(&k1).map(|(x, y)| x + 0.5 * h * y).collect::<Vec<_>>());
            let k3 = f(&e.iter().zip(&k2).map(|(x, y)| x + 0.5 * h * y).collect::<Vec<_>>());
            let k4 = f(&e.iter().zip(&k3).map(|(x, y)| x + h * y).collect::<Vec<_>>());
            for i in 0..4 {
                e[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
}
