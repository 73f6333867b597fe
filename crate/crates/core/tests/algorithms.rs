mod common;

use proptest::prelude::*;

use intercomm_sgd::algorithms::{run, Algorithm, MetricKind, RunConfig};
use intercomm_sgd::harness::io::trace_to_csv;
use intercomm_sgd::harness::{tune_problem, ExperimentSpec, Persist, ProblemSource};
use intercomm_sgd::oracle::OracleConfig;

#[test]
fn tau_one_localsgd_is_mbsgd() {
    common::tau_one_equivalence().unwrap();
}

#[test]
fn homogeneous_noiseless_localsgd_is_gradient_descent() {
    common::homogeneous_equals_gd().unwrap();
}

#[test]
fn hand_simulated_examples() {
    common::hand_examples().unwrap();
}

#[test]
fn scaffold_spends_two_protocol_rounds_per_loop() {
    let p = common::random_instance(2, 4, 3, 0.01);
    let cfg = RunConfig::new(Algorithm::Scaffold, 0.05, 3, 4, vec![0.0; 4], OracleConfig::exact());
    let tr = run(&p, &cfg).unwrap();
    // rounds are numbered from zero
    assert_eq!(tr.records.last().unwrap().round, 7);
    assert_eq!(tr.queries_per_worker, 4 * 2 * 3);
}

#[test]
fn noise_does_not_help_a_tuned_run() {
    let p = common::random_instance(21, 8, 4, 0.01);
    let tuned = |sigma| {
        let spec = ExperimentSpec {
            problem: ProblemSource::Bundle { bundle: "unused".into() },
            algorithms: vec![Algorithm::Localsgd],
            tau: 5,
            rounds: 20,
            stepsize_grid: vec![0.003, 0.01, 0.03, 0.1],
            seeds: vec![111, 222, 333],
            sigma,
            metric: MetricKind::AvgGradNormSq,
            output_dir: "unused".into(),
        };
        let (r, _) = tune_problem(&spec, &p, Persist::Nothing).unwrap();
        r.algorithms[0].chosen_cell().clone()
    };
    let quiet = tuned(0.0).mean.unwrap();
    let noisy = tuned(0.01);
    let vals: Vec<f64> = noisy.per_seed.iter().map(|v| v.unwrap()).collect();
    let mean = noisy.mean.unwrap();
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!(quiet <= mean + 3.0 * sd / 3f64.sqrt(), "{quiet} vs {mean} +- {sd}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tau_one_equivalence_for_any_seed(seed in any::<u64>(), eta in 0.001f64..0.2, sigma in 0.0f64..0.5) {
        let p = common::random_instance(seed, 5, 3, 0.01);
        let oracle = OracleConfig::gaussian(sigma, seed).unwrap();
        let trace = |a| run(&p, &RunConfig::new(a, eta, 1, 15, vec![0.0; 5], oracle)).unwrap();
        let (l, m) = (trace(Algorithm::Localsgd), trace(Algorithm::Mbsgd));
        prop_assert_eq!(trace_to_csv(&l.records), trace_to_csv(&m.records));
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>(), tau in 2u64..6) {
        let p = common::random_instance(seed, 4, 2, 0.01);
        let oracle = OracleConfig::gaussian(0.1, seed).unwrap();
        for a in [Algorithm::Mbsgd, Algorithm::Localsgd, Algorithm::Scaffold] {
            let cfg = RunConfig::new(a, 0.05, tau, 3, vec![0.5; 4], oracle);
            prop_assert_eq!(run(&p, &cfg).unwrap(), run(&p, &cfg).unwrap());
        }
    }
}
