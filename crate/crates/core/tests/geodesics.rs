use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccmplan_core::controller::{feedback_control, riemann_energy, GeodesicOpts, MetricField};
use ccmplan_core::nnet::PsdMetricNet;
use ccmplan_core::num::{spectral_bounds, Mat, SymMatrix};
use ccmplan_core::pipeline::{double_integrator, lyapunov_bundle};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn constant_metric(entries: &[f64]) -> PsdMetricNet {
    let a = Mat::from_vec(3, 3, entries.to_vec()).unwrap();
    let w = a.transpose().matmul(&a).add(&Mat::identity(3).scale(0.2));
    PsdMetricNet::constant(&w, 0.01, &[0, 1, 2]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constant_metric_energy_is_symmetric(
        entries in prop::collection::vec(-1.0..1.0f64, 9),
        p in prop::collection::vec(-2.0..2.0f64, 3),
        q in prop::collection::vec(-2.0..2.0f64, 3),
    ) {
        let m = constant_metric(&entries);
        let opts = GeodesicOpts::default();
        let pq = riemann_energy(&m, &p, &q, &opts).unwrap().energy;
        let qp = riemann_energy(&m, &q, &p, &opts).unwrap().energy;
        prop_assert!((pq - qp).abs() <= 1e-9);
    }

    #[test]
    fn energy_dominates_scaled_squared_distance(
        seed in 0u64..1000,
        p in prop::collection::vec(-1.5..1.5f64, 3),
        q in prop::collection::vec(-1.5..1.5f64, 3),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = PsdMetricNet::new(3, &[0, 1, 2], &[8], 0.1, &mut rng).unwrap();
        let geo = riemann_energy(&net, &p, &q, &GeodesicOpts::default()).unwrap();
        prop_assert_eq!(geo.points.first().unwrap(), &p);
        prop_assert_eq!(geo.points.last().unwrap(), &q);
        // The discrete energy weighs each segment by M at its midpoint.
        let lam_min = geo
            .points
            .windows(2)
            .map(|w| {
                let mid: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| 0.5 * (a + b)).collect();
                let (m, _) = net.m_and_grad(&mid);
                spectral_bounds(&SymMatrix::from_nearly_symmetric(&m).unwrap()).0
            })
            .fold(f64::INFINITY, f64::min);
        prop_assert!(geo.energy >= lam_min * dist(&p, &q).powi(2) - 1e-9);
    }
}

#[test]
fn closed_loop_energy_never_increases() {
    let lam = 0.5;
    let bundle = lyapunov_bundle(lam).unwrap();
    let g = double_integrator(true).unwrap();
    let (m, _) = bundle.metric.m_and_grad(&[0.0; 4]);
    let energy = |e: &[f64]| -> f64 { e.iter().zip(m.mul_vec(e)).map(|(a, b)| a * b).sum() };
    let opts = GeodesicOpts::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (x_star, u_star) = ([0.0; 4], [0.0; 2]);
    for _ in 0..100 {
        let mut x: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut last = energy(&x);
        for _ in 0..300 {
            let fb = feedback_control(&bundle, &g, &x, &x_star, &u_star, None, &opts, None).unwrap();
            let h = 0.01;
            let dx = g.eval_learned(&x, &fb.u).unwrap();
            let mid: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + 0.5 * h * b).collect();
            let dm = g.eval_learned(&mid, &fb.u).unwrap();
            x = x.iter().zip(&dm).map(|(a, b)| a + h * b).collect();
            let e = energy(&x);
            assert!(e <= last * (1.0 + 1e-9) + 1e-15, "energy rose from {last} to {e}");
            last = e;
        }
    }
}
