use dps_core::gradcheck::{run_suite, TOLERANCE};

#[test]
fn every_component_matches_finite_differences() {
    let report = run_suite(11).unwrap();
    let bad: Vec<_> = report.rows.iter().filter(|r| !r.passed).collect();
    assert!(bad.is_empty(), "failing checks: {bad:#?}");
    assert!(report.max_rel_error < TOLERANCE);
    for group in ["ops", "composite", "time_kernel", "conv", "fusion", "head", "loss", "gas", "end_to_end"] {
        assert!(report.rows.iter().any(|r| r.group == group), "missing group {group}");
    }
}

#[test]
fn end_to_end_covers_every_parameter_tensor() {
    let checks = dps_core::gradcheck::end_to_end_checks(3).unwrap();
    let names: Vec<_> = checks.iter().map(|c| c.name.as_str()).collect();
    for n in ["dps.node_table", "dps.time.omega", "dps.conv0.w_q", "dps.conv1.merge", "dps.fusion.q", "dps.head.w"] {
        assert!(names.contains(&n), "{n} not checked: {names:?}");
    }
    for c in &checks {
        assert!(c.analytic_norm > 0.0, "{} received no gradient", c.name);
        assert!(c.rel_error < 1e-4, "{} rel error {}", c.name, c.rel_error);
    }
}
