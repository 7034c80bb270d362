//! Claims made about the named example environments.

use commitq::dp::{optimal_reactive, policy_return, qstar_realizability};
use commitq::env::{is_proper, DEFAULT_ENUMERATION_CAP as CAP};
use commitq::quasi::{entrance_dims, is_quasi_markov};
use commitq::rewire::{
    check_generalized_rewire_robust, check_pi_rewire_robust, check_rewire_robust, is_generalized_rewiring,
    is_rewiring, pi_rewiring, VerdictKind, DEFAULT_SAMPLES,
};
use commitq::zoo::{self, Fig3Variant};
use commitq::{Environment, ReactivePolicy};

/// Policy from `(feature, option)` names; unnamed features take option 0.
fn policy(env: &Environment, choices: &[(&str, &str)]) -> ReactivePolicy {
    let mut c = vec![0; env.n_features()];
    for (z, o) in choices {
        c[env.feature_index(z).unwrap()] = env.option_index(o).unwrap();
    }
    ReactivePolicy::new(c)
}

#[test]
fn every_zoo_environment_is_proper() {
    for (name, env) in zoo::catalog() {
        assert!(is_proper(&env, CAP).unwrap().proper, "{name}");
    }
}

#[test]
fn corridor_blue_aggregation_is_quasi_markov() {
    for k in 2..=10 {
        let env = zoo::corridor(k, -1.0).unwrap();
        assert!(is_quasi_markov(&env), "k = {k}");
        let opt = optimal_reactive(&env, CAP).unwrap();
        assert_eq!(opt.policies, vec![policy(&env, &[("start", "right"), ("corridor", "right")])]);
        assert!(opt.value.abs() < 1e-12);
    }
}

#[test]
fn corridor_green_aggregation_is_rewire_robust_but_not_quasi_markov() {
    for k in [3, 5, 8] {
        let env = zoo::corridor_green(k).unwrap();
        assert!(!is_quasi_markov(&env));
        assert_eq!(entrance_dims(&env)[env.feature_index("green").unwrap()], 2);
        assert_ne!(check_rewire_robust(&env, DEFAULT_SAMPLES, 0, CAP).unwrap().kind, VerdictKind::Refuted);
    }
}

#[test]
fn fig3a_direct_path_is_optimal_with_return_zero() {
    let env = zoo::fig3(Fig3Variant::A).unwrap();
    let opt = optimal_reactive(&env, CAP).unwrap();
    assert!(opt.value.abs() < 1e-12);
    assert!(opt.contains(&policy(&env, &[("za", "right"), ("zb", "right")])));
    assert!(opt.policies.iter().all(|p| p.option_at(0) == env.option_index("right").unwrap()));
    assert!(!qstar_realizability(&env).unwrap().realizable);
}

#[test]
fn fig3b_is_a_rewiring_with_the_same_optimum() {
    let a = zoo::fig3(Fig3Variant::A).unwrap();
    let b = zoo::fig3(Fig3Variant::B).unwrap();
    assert_eq!(is_rewiring(&b, &a).unwrap(), None);
    let best = optimal_reactive(&b, CAP).unwrap();
    let direct = policy(&a, &[("za", "right"), ("zb", "right")]);
    assert!(best.contains(&direct));
    for p in &best.policies {
        assert!(policy_return(&a, p).unwrap() >= -1e-12);
    }
}

#[test]
fn fig3c_is_a_quasi_markov_rewiring() {
    for delta in [0.1, 0.3, 0.7] {
        let a = zoo::fig3(Fig3Variant::A).unwrap();
        let c = zoo::fig3(Fig3Variant::C { delta }).unwrap();
        assert!(is_quasi_markov(&c));
        assert!(!is_quasi_markov(&a));
        assert_eq!(is_rewiring(&c, &a).unwrap(), None);
    }
}

#[test]
fn fig3d_is_generalized_but_not_plain_rewiring() {
    let a = zoo::fig3(Fig3Variant::A).unwrap();
    let d = zoo::fig3(Fig3Variant::D).unwrap();
    assert_eq!(is_generalized_rewiring(&d, &a).unwrap(), None);
    assert!(is_rewiring(&d, &a).unwrap().is_some());
    let opt = optimal_reactive(&d, CAP).unwrap();
    assert!((opt.value - 1.0).abs() < 1e-12);
    assert!(opt.policies.iter().all(|p| p.option_at(0) == d.option_index("up").unwrap()));
    assert_eq!(
        check_generalized_rewire_robust(&a, DEFAULT_SAMPLES, 0, CAP).unwrap().kind,
        VerdictKind::Refuted
    );
    assert_eq!(check_rewire_robust(&a, DEFAULT_SAMPLES, 0, CAP).unwrap().kind, VerdictKind::SampledPass);
    assert_eq!(check_rewire_robust(&d, DEFAULT_SAMPLES, 0, CAP).unwrap().kind, VerdictKind::Refuted);
}

#[test]
fn fig4_is_not_rewire_robust_and_its_pi_rewiring_is_quasi_markov() {
    for delta in [0.2, 0.5, 0.8] {
        let (env, b) = zoo::fig4(delta).unwrap();
        let opt = optimal_reactive(&env, CAP).unwrap();
        let right = env.option_index("right").unwrap();
        assert!((opt.value - 1.0).abs() < 1e-12);
        assert!(opt.policies.iter().all(|p| p.option_at(0) == right));
        let rw = pi_rewiring(&env, &b, CAP).unwrap();
        assert!(is_quasi_markov(&rw.env));
        assert_eq!(is_rewiring(&rw.env, &env).unwrap(), None);
        assert_eq!(check_rewire_robust(&env, DEFAULT_SAMPLES, 0, CAP).unwrap().kind, VerdictKind::Refuted);
    }
}

#[test]
fn prr_is_pi_rewire_robust_but_not_rewire_robust() {
    for delta in [0.1, 0.4, 0.9] {
        let (env, b) = zoo::prr(delta).unwrap();
        let opt = optimal_reactive(&env, CAP).unwrap();
        let right = env.option_index("right").unwrap();
        assert!((opt.value - 2.0).abs() < 1e-12);
        assert!(opt.policies.iter().all(|p| p.option_at(0) == right));
        assert_eq!(check_pi_rewire_robust(&env, &b, CAP).unwrap().kind, VerdictKind::ExactPass);
        let v = check_rewire_robust(&env, DEFAULT_SAMPLES, 0, CAP).unwrap();
        assert_eq!(v.kind, VerdictKind::Refuted);
        let w = v.witness.unwrap();
        assert_eq!(is_rewiring(&w.rewiring, &env).unwrap(), None);
    }
}

#[test]
fn tmaze_memory_aggregation_is_rewire_robust_and_memoryless_is_not() {
    for len in [1, 2, 3] {
        let mem = zoo::tmaze(len).unwrap();
        let opt = optimal_reactive(&mem, CAP).unwrap();
        assert!((opt.value - 1.0).abs() < 1e-12);
        assert_ne!(check_rewire_robust(&mem, DEFAULT_SAMPLES, 0, CAP).unwrap().kind, VerdictKind::Refuted);

        let flat = zoo::tmaze_memoryless(len).unwrap();
        assert!(optimal_reactive(&flat, CAP).unwrap().value < 1.0 - 1e-6);
        assert_eq!(check_rewire_robust(&flat, DEFAULT_SAMPLES, 0, CAP).unwrap().kind, VerdictKind::Refuted);
    }
}

#[test]
fn zoo_references_reject_bad_input() {
    for bad in ["nope", "corridor:k=1", "corridor:k=x", "fig3:variant=z", "fig4:delta=1.5", "corridor:q=2"] {
        assert!(zoo::from_ref(bad).is_err(), "{bad}");
    }
}
