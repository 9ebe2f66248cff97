mod common;

use common::suites::gradient_suites;

#[test]
fn every_op_cell_and_loss_matches_finite_differences() {
    for r in gradient_suites(4, 11) {
        assert!(r.worst <= 1e-4, "{}: relative error {:.3e}", r.name, r.worst);
    }
}
