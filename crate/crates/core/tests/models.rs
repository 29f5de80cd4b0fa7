use proptest::prelude::*;

use ccmplan_core::models::{generate_dataset, SamplingMode, SystemSpec};

proptest! {
    #[test]
    fn car_speed_identity(x in prop::collection::vec(-10.0..10.0f64, 4), u in prop::collection::vec(-1.0..1.0f64, 2)) {
        let dx = SystemSpec::car().eval_true(&x, &u).unwrap();
        let v2 = x[3] * x[3];
        prop_assert!((dx[0] * dx[0] + dx[1] * dx[1] - v2).abs() <= 1e-12 * v2.max(1.0));
    }

    #[test]
    fn labels_are_exact(seed in 0u64..10_000, system in prop::sample::select(vec!["car", "quadrotor", "linear"]), trajectories in any::<bool>()) {
        let sys = SystemSpec::by_name(system).unwrap();
        let mode = if trajectories { SamplingMode::PerturbedTrajectories } else { SamplingMode::UniformBox };
        let data = generate_dataset(&sys, 40, mode, seed).unwrap();
        prop_assert_eq!(data.len(), 40);
        for s in &data.samples {
            prop_assert_eq!(&s.dx, &sys.eval_true(&s.x, &s.u).unwrap());
            prop_assert!(s.x.iter().zip(&sys.state_box).all(|(v, &(lo, hi))| lo <= *v && *v <= hi));
        }
    }
}
