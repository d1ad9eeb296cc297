mod common;

use std::collections::BTreeMap;

use common::gradcheck::{run_all, REL_TOL, SEEDS};

#[test]
fn every_op_matches_finite_differences() {
    let mut by_op: BTreeMap<&str, (usize, f64, usize)> = BTreeMap::new();
    for r in run_all() {
        let e = by_op.entry(r.op).or_insert((0, 0.0, 0));
        e.0 = e.0.max(r.shape_index + 1);
        e.1 = e.1.max(r.max_rel_err);
        e.2 += 1;
    }
    assert!(by_op.len() >= 18);
    for (op, (shapes, worst, runs)) in by_op {
        assert!(shapes >= 3, "{op}: only {shapes} shapes");
        assert_eq!(runs, shapes * SEEDS.len());
        assert!(worst <= REL_TOL, "{op}: max relative error {worst:e}");
    }
}
