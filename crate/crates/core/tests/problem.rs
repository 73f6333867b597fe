mod common;

use nalgebra::DVector;

use intercomm_sgd::conditioning::{estimate_all, SamplerConfig};
use intercomm_sgd::problem::{generate_problem, GenerationSpec};

#[test]
fn derivatives_match_finite_differences() {
    common::finite_differences(100, 11).unwrap();
}

#[test]
fn derivatives_match_on_a_second_instance() {
    common::finite_differences(20, 12345).unwrap();
}

#[test]
fn experiment_instance_meets_its_targets() {
    let spec = GenerationSpec::experiment(1, Some(0.03), 0.01, 0.01);
    let p = generate_problem(&spec).unwrap();
    let a = p.achieved.unwrap();
    assert!((a.zeta - 0.03).abs() <= 0.1 * 0.03, "zeta {}", a.zeta);
    assert!((a.delta - 0.01).abs() <= 0.1 * 0.01, "delta {}", a.delta);

    let report = estimate_all(&p, &SamplerConfig::default(), None, &DVector::zeros(100)).unwrap();
    assert!((0.8..=1.2).contains(&report.l), "L = {}", report.l);
    assert!((report.gap - 1.0).abs() < 0.1, "Delta = {}", report.gap);
    assert!(report.zeta <= report.zeta_bar && report.delta <= report.delta_bar);
    assert!(report.rho <= report.l);
}
