use vimco_core::verify::{all_pass, finite_difference_checks};

#[test]
fn analytic_gradients_match_central_differences() {
    let rows = finite_difference_checks(11, 60).unwrap();
    for prefix in ["fd/log_joint", "fd/log_q", "fd/baseline"] {
        let n = rows.iter().filter(|r| r.name.starts_with(prefix)).count();
        assert!(n >= 30, "{prefix}: {n} points");
    }
    let bad: Vec<_> = rows.iter().filter(|r| !r.pass).collect();
    assert!(all_pass(&rows), "{bad:#?}");
}
