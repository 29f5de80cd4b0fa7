use proptest::prelude::*;

use ccmplan_core::sim::{first_violation, TraceRow, VIOLATION_TOL};

fn trace() -> impl Strategy<Value = Vec<TraceRow>> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..0.5f64), 1..200).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(k, (eps, eps_bar, u_fb))| TraceRow {
                t: 0.01 * k as f64,
                eps,
                eps_bar,
                u_fb,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn violation_time_matches_a_direct_scan(rows in trace()) {
        let mut expected = None;
        for r in &rows {
            if r.eps > r.eps_bar + VIOLATION_TOL {
                expected = Some(r.t);
                break;
            }
        }
        prop_assert_eq!(first_violation(&rows), expected);
    }
}
