mod common;

use common::suite::run_suite;

#[test]
fn every_operation_matches_finite_differences() {
    let cases = run_suite(7);
    let bad: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}: {:.2e} (tol {:.0e})", c.name, c.err, c.tol))
        .collect();
    assert!(bad.is_empty(), "{bad:#?}");
    assert!(cases.len() > 40);
}
