use nucleo_core::gradcheck::GradCheckConfig;
use nucleo_core::gradsuite::{all_cases, block_cases, COMPOSITE_EPS};

const TOL: f64 = 1e-5;

#[test]
fn every_case_matches_finite_differences() {
    let mut failures = Vec::new();
    for c in all_cases().unwrap() {
        let r = c.run_default().unwrap();
        let probes = c.config().probes;
        println!(
            "{:32} checked {:3} kinks {:3} max_rel {:.2e}",
            c.name, r.checked, r.skipped_kinks, r.max_rel_error
        );
        if !r.passes(TOL) || r.checked < probes {
            failures.push(format!("{}: {:?}", c.name, r));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn composite_residual_shrinks_quadratically_with_step() {
    let case = block_cases().unwrap().into_iter().find(|c| c.name == "rru").unwrap();
    let coarse = case.run(&GradCheckConfig { eps: 1e-3, ..GradCheckConfig::default() }).unwrap();
    let fine = case.run(&GradCheckConfig { eps: COMPOSITE_EPS, ..GradCheckConfig::default() }).unwrap();
    let ratio = coarse.max_rel_error / fine.max_rel_error;
    assert!((30.0..300.0).contains(&ratio), "ratio {ratio}");
}
