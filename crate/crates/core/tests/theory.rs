mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use intercomm_sgd::theory::{rate_bound, theoretical_stepsize, RateKind, RateParams};

#[test]
fn worked_examples_match_hand_evaluation() {
    common::theory_examples().unwrap();
}

#[test]
fn rates_are_monotone_over_500_perturbations() {
    common::rate_monotonicity(500, 99).unwrap();
}

#[test]
fn lemma_suites_have_no_violations() {
    common::lemma_suites(1000, 7).unwrap();
}

fn asymptotic(zeta: f64, rho: f64, rounds: u64) -> RateParams {
    RateParams {
        zeta: Some(zeta),
        rho: Some(rho),
        delta: Some(0.0),
        ..common::unit_params(10, 1_000_000_000, rounds)
    }
}

#[test]
fn localsgd_rate_simplifies_for_many_local_steps() {
    for (zeta, rho, r) in [(0.1, 0.05, 100u64), (0.5, 0.0, 1000), (0.02, 0.2, 50)] {
        let b = rate_bound(RateKind::LocalsgdFaster, &asymptotic(zeta, rho, r)).unwrap();
        let r = r as f64;
        let simple = rho / r + (zeta / r).powf(2.0 / 3.0);
        assert!((b.total - simple).abs() <= 0.02 * simple, "{} vs {simple}", b.total);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    // With unit constants the LocalSGD bound at zeta^2 = 1/R is (1 + rho)/R,
    // above MbSGD's 1/R, so the ordering is checked on zeta^2 <= 1/(8R).
    #[test]
    fn localsgd_beats_mbsgd_in_the_asymptotic_regime(
        r in 1u64..100_000, z in 0.0f64..=1.0, rho in 0.0f64..=0.1,
    ) {
        let zeta = z / (8.0 * r as f64).sqrt();
        let p = asymptotic(zeta, rho, r);
        let local = rate_bound(RateKind::LocalsgdFaster, &p).unwrap().total;
        let mb = rate_bound(RateKind::Mbsgd, &p).unwrap().total;
        prop_assert!(local <= mb, "{} > {}", local, mb);
    }

    #[test]
    fn scaffold_beats_mbsgd_in_the_asymptotic_regime(
        r in 1u64..100_000, delta in 0.0f64..=0.01, rho in 0.0f64..=0.1,
    ) {
        let p = RateParams { delta: Some(delta), ..asymptotic(0.0, rho, r) };
        let sc = rate_bound(RateKind::ScaffoldSpeedup, &p).unwrap().total;
        let mb = rate_bound(RateKind::Mbsgd, &p).unwrap().total;
        prop_assert!(sc <= mb, "{} > {}", sc, mb);
    }

    #[test]
    fn stepsize_is_the_smallest_term(seed in any::<u64>(), t in 1u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::full_params(&mut rng);
        for kind in RateKind::ALL.into_iter().filter(|k| k.has_stepsize()) {
            let s = theoretical_stepsize(kind, &p, t).unwrap();
            prop_assert!(s.eta > 0.0 && s.eta.is_finite());
            prop_assert!(s.terms.iter().all(|term| s.eta <= term.value));
            prop_assert!(s.terms.iter().any(|term| s.eta == term.value));
        }
    }

    #[test]
    fn rate_totals_are_term_sums(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::full_params(&mut rng);
        for kind in RateKind::ALL {
            let b = rate_bound(kind, &p).unwrap();
            let sum: f64 = b.terms.iter().map(|t| t.value).sum();
            prop_assert!((b.total - sum).abs() <= 1e-12 * sum.max(1.0));
        }
    }
}
