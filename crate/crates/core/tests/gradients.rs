use dipuq_core::gradsuite::{run_check, run_suite, CHECKS, GRAD_TOLERANCE};

#[test]
fn every_primitive_passes() {
    let reports = run_suite(1.0).unwrap();
    assert_eq!(reports.len(), CHECKS.len());
    for r in &reports {
        println!("{:<20} {:.3e}", r.name, r.max_rel_error);
    }
    for r in &reports {
        assert!(r.max_rel_error < GRAD_TOLERANCE, "{}: {}", r.name, r.max_rel_error);
    }
}

#[test]
fn perturbed_backward_is_detected() {
    for name in ["conv2d", "instance_norm", "generator_nll"] {
        let r = run_check(name, 1.001).unwrap();
        assert!(!r.passed(), "{name}: {}", r.max_rel_error);
    }
}

#[test]
fn unknown_check_rejected() {
    assert!(run_check("softmax", 1.0).is_err());
}
