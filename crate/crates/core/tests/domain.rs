use proptest::prelude::*;

use ccmplan_core::domain::{r_connect, TrustedDomain};

fn cloud(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..5).prop_flat_map(move |d| prop::collection::vec(prop::collection::vec(-1.0..1.0f64, d), 2..max))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn components(points: &[Vec<f64>], r: f64) -> usize {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut count = n;
    for i in 0..n {
        for j in i + 1..n {
            if dist(&points[i], &points[j]) <= r {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a] = b;
                    count -= 1;
                }
            }
        }
    }
    count
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn r_connect_is_the_connectivity_threshold(points in cloud(200)) {
        let r = r_connect(&points).unwrap();
        prop_assert_eq!(components(&points, r), 1);
        if r > 0.0 {
            prop_assert!(components(&points, r * (1.0 - 1e-9)) > 1);
        }
    }

    #[test]
    fn margin_check_is_monotone(points in cloud(40), q in prop::collection::vec(0.0..1.0f64, 2), seed in prop::collection::vec(-1.2..1.2f64, 4)) {
        let d = points[0].len();
        let dom = TrustedDomain::new(points.clone(), vec![0.0; points.len()], 0.5, d).unwrap();
        let z = &seed[..d.min(4)];
        let (lo, hi) = if q[0] <= q[1] { (q[0], q[1]) } else { (q[1], q[0]) };
        if dom.margin_check(z, hi) {
            prop_assert!(dom.margin_check(z, lo));
        }
    }

    #[test]
    fn min_error_term_is_lipschitz(
        (points, errors, a, b) in cloud(40).prop_flat_map(|p| {
            let (n, d) = (p.len(), p[0].len());
            (Just(p), prop::collection::vec(0.0..0.5f64, n), prop::collection::vec(-1.5..1.5f64, d), prop::collection::vec(-1.5..1.5f64, d))
        }),
        l in 0.0..3.0f64,
    ) {
        let d = points[0].len();
        let dom = TrustedDomain::new(points, errors, 0.4, d).unwrap();
        let (fa, fb) = (dom.min_error_term(&a, l).0, dom.min_error_term(&b, l).0);
        prop_assert!((fa - fb).abs() <= l * dist(&a, &b) + 1e-12);
    }
}
