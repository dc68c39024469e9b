use caselink_core::neural::gradcheck::{check_gradients, GRADCHECK_OPS};

#[test]
fn every_registered_op_passes_ten_trials() {
    for op in GRADCHECK_OPS {
        let r = check_gradients(op, 10, 2024).unwrap();
        println!(
            "{op:<18} entries={:<6} max_rel={:.3e} max_abs={:.3e}",
            r.entries_checked, r.max_rel_error, r.max_abs_error
        );
        assert!(r.passed, "{r:?}");
    }
}
