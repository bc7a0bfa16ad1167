use dsfer_core::gradcheck::{run_suite, Scale, TOLERANCE};

#[test]
fn small_suite_passes() {
    let report = run_suite(Scale::Small).unwrap();
    println!("{}", report.table());
    for row in &report.rows {
        assert!(row.passed, "{} max rel err {:e} >= {TOLERANCE:e}", row.name, row.max_rel_error);
    }
}

#[test]
fn primitives_and_stages_pass_over_many_seeds() {
    let report = run_suite(Scale::Full).unwrap();
    println!("{}", report.table());
    for row in report.rows.iter().filter(|r| r.name != "full_tiny_network") {
        assert!(row.seeds >= 3, "{}", row.name);
        assert!(row.passed, "{} max rel err {:e} >= {TOLERANCE:e}", row.name, row.max_rel_error);
    }
    assert!(report.rows.iter().filter(|r| r.kind == "primitive").all(|r| r.seeds == 20));
}
