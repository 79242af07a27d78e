use std::time::{Duration, Instant};

use spatialedit::diagnostics::{gradcheck_suite, END_TO_END_TOLERANCE, OP_TOLERANCE};

#[test]
fn every_operation_and_loss_passes_finite_differences() {
    let start = Instant::now();
    let rep = gradcheck_suite(7).unwrap();
    assert!(start.elapsed() < Duration::from_secs(120));
    assert!(rep.all_passed(), "{rep}");
    for row in &rep.rows {
        let tol = if row.name.starts_with("fm_loss") {
            END_TO_END_TOLERANCE
        } else {
            OP_TOLERANCE
        };
        assert_eq!(row.tolerance, tol, "{}", row.name);
        assert!(row.rel_error < tol, "{}: {}", row.name, row.rel_error);
    }
    for needed in [
        "matmul",
        "softmax",
        "layer_norm",
        "gelu",
        "sigmoid",
        "phi",
        "fm_loss/backbone",
        "fm_loss/edit/full",
    ] {
        assert!(rep.rows.iter().any(|r| r.name == needed), "missing {needed}");
    }
    for mode in ["full", "no-text-gate", "no-update", "naive-parallel-2d"] {
        assert!(rep.rows.iter().any(|r| r.name == format!("fm_loss/edit/{mode}")));
    }
}

#[test]
fn suite_is_reproducible() {
    let a = gradcheck_suite(3).unwrap();
    let b = gradcheck_suite(3).unwrap();
    assert_eq!(a.rows, b.rows);
}
