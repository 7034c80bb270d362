use nalgebra::DVector;
use proptest::prelude::*;

use commitq::dp::{mdp_q_star, optimal_reactive, policy_return, policy_value};
use commitq::env::DEFAULT_ENUMERATION_CAP as CAP;
use commitq::format::{parse_env, write_env};
use commitq::learn::{
    every_n, q_learning_traced, solve_fixed_point, BehaviorMode, FixedPointOperator, QTable, RunConfig, StepSchedule,
};
use commitq::random::{random_behavior, random_env, random_policy, random_realizable_env, Shape};
use commitq::rewire::{
    check_generalized_rewire_robust, check_pi_rewire_robust, check_rewire_robust, is_generalized_rewiring,
    is_rewiring, pi_mdp, VerdictKind,
};
use commitq::risk::RiskModel;
use commitq::rng::stream_rng;
use commitq::{BehaviorPolicy, Environment, Next, ReactivePolicy};

fn small() -> Shape {
    Shape {
        max_states: 6,
        max_features: 3,
        max_actions: 2,
        sparsity: 0.4,
    }
}

struct Case {
    env: Environment,
    behavior: BehaviorPolicy,
    policy: ReactivePolicy,
}

fn case(seed: u64) -> Case {
    let mut rng = stream_rng(seed, 0);
    let env = random_env(&mut rng, &small()).unwrap();
    let behavior = random_behavior(&mut rng, env.n_features(), env.n_options());
    let policy = random_policy(&mut rng, env.n_features(), env.n_options());
    Case { env, behavior, policy }
}

fn random_q(seed: u64, nz: usize, no: usize) -> QTable {
    let mut rng = stream_rng(seed, 1);
    let mut q = QTable::zeros(nz, no);
    q.q.iter_mut().for_each(|v| *v = rand::Rng::random_range(&mut rng, -5.0..5.0));
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fixed_point_operator_is_nonexpansive(seed in any::<u64>(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let c = case(seed);
        let f = FixedPointOperator::new(&c.env, &c.behavior).unwrap();
        let (nz, no) = (c.env.n_features(), c.env.n_options());
        let (q1, q2) = (random_q(s1, nz, no), random_q(s2, nz, no));
        prop_assert!(f.apply(&q1).distance(&f.apply(&q2)) <= q1.distance(&q2) + 1e-12);
    }

    #[test]
    fn fixed_point_is_the_optimal_value_of_the_averaged_mdp(seed in any::<u64>()) {
        let c = case(seed);
        let q = solve_fixed_point(&c.env, &c.behavior).unwrap();
        let agg = pi_mdp(&c.env, &c.behavior, CAP).unwrap().to_environment().unwrap();
        let q_star = mdp_q_star(&agg).unwrap();
        // Features the behavior never reaches keep the averaged MDP's
        // arbitrary entrances, so only reached features are compared.
        let m = RiskModel::new(&c.env, &c.policy, &c.behavior).unwrap();
        for z in (0..c.env.n_features()).filter(|&z| m.feature_marginal()[z] > 0.0) {
            prop_assert!((q.q.row(z) - q_star.q.row(z)).amax() < 1e-9);
        }
    }

    #[test]
    fn enumeration_dominates_every_policy(seed in any::<u64>()) {
        let c = case(seed);
        let opt = optimal_reactive(&c.env, CAP).unwrap();
        prop_assert!(policy_return(&c.env, &c.policy).unwrap() <= opt.value + 1e-12);
        for p in &opt.policies {
            prop_assert!((policy_return(&c.env, p).unwrap() - opt.value).abs() <= 1e-9);
        }
        // Reactive policies cannot beat the underlying MDP.
        let v = mdp_q_star(&c.env).unwrap().state_values();
        prop_assert!(opt.value <= c.env.p0().dot(&v) + 1e-8);
    }

    #[test]
    fn environment_files_round_trip(seed in any::<u64>()) {
        let c = case(seed);
        let text = write_env(&c.env);
        prop_assert_eq!(parse_env(&text).unwrap(), c.env);
    }

    #[test]
    fn committed_learner_keeps_its_option_inside_a_feature(seed in any::<u64>()) {
        let c = case(seed);
        let config = RunConfig {
            total_steps: 5_000,
            committed: true,
            behavior: BehaviorMode::Fixed(c.behavior),
            alpha: StepSchedule::from_anchors(0.1, 0.01).unwrap(),
            checkpoints: vec![],
            snapshots: false,
        };
        let mut prev: Option<commitq::learn::Visit> = None;
        let mut broken = 0;
        q_learning_traced(&c.env, &config, &mut stream_rng(seed, 2), |_, v| {
            if let Some(p) = prev {
                if p.next == Next::State(v.x) && p.feature == v.feature && p.option != v.option {
                    broken += 1;
                }
            }
            prev = Some(*v);
        }).unwrap();
        prop_assert_eq!(broken, 0);
    }

    #[test]
    fn each_update_touches_only_the_visited_entry(seed in any::<u64>()) {
        let c = case(seed);
        let total = 300;
        let config = RunConfig {
            total_steps: total,
            committed: true,
            behavior: BehaviorMode::Fixed(c.behavior),
            alpha: StepSchedule::from_anchors(0.1, 0.01).unwrap(),
            checkpoints: every_n(1, total),
            snapshots: true,
        };
        let mut visits = Vec::new();
        let (_, log) = q_learning_traced(&c.env, &config, &mut stream_rng(seed, 3), |t, v| visits.push((t, *v))).unwrap();
        let snaps: Vec<&QTable> = log.checkpoints.iter().map(|cp| cp.q.as_ref().unwrap()).collect();
        for w in log.checkpoints.windows(2) {
            let (t0, t1) = (w[0].t, w[1].t);
            prop_assert_eq!(t1, t0 + 1);
            let v = visits[t0 as usize].1;
            let diff = &snaps[t1 as usize - 1].q - &snaps[t0 as usize - 1].q;
            for z in 0..diff.nrows() {
                for o in 0..diff.ncols() {
                    if (z, o) != (v.feature, v.option) {
                        prop_assert_eq!(diff[(z, o)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn value_risk_is_minimized_by_the_conditional_return(seed in any::<u64>(), dir in any::<u64>()) {
        let c = case(seed);
        let m = RiskModel::new(&c.env, &c.policy, &c.behavior).unwrap();
        let v = m.minimize_value_risk();
        prop_assert!((&v - m.conditional_return()).amax() < 1e-12);
        let d = random_q(dir, c.env.n_features(), 1).q.column(0).into_owned() * 0.01;
        prop_assert!(m.value_risk(&(&v + &d)) >= m.value_risk(&v) - 1e-12);
    }

    #[test]
    fn bellman_risk_is_minimized_by_the_averaged_mdp_value(seed in any::<u64>()) {
        let c = case(seed);
        let m = RiskModel::new(&c.env, &c.policy, &c.behavior).unwrap();
        let v = m.minimize_bellman_risk().unwrap();
        let agg = pi_mdp(&c.env, &c.behavior, CAP).unwrap().to_environment().unwrap();
        let v_hat = policy_value(&agg, &c.policy).unwrap();
        for z in (0..v.len()).filter(|&z| m.feature_marginal()[z] > 0.0) {
            prop_assert!((v[z] - v_hat[z]).abs() < 1e-8, "feature {}: {} vs {}", z, v[z], v_hat[z]);
        }
        prop_assert!(m.bellman_risk(&v) < 1e-12);
    }

    #[test]
    fn bellman_error_gradient_vanishes_at_its_minimizer(seed in any::<u64>()) {
        let c = case(seed);
        let m = RiskModel::new(&c.env, &c.policy, &c.behavior).unwrap();
        let v = m.minimize_bellman_error().unwrap();
        let h = 1e-5;
        for z in 0..v.len() {
            let e = DVector::from_fn(v.len(), |i, _| if i == z { h } else { 0.0 });
            let g = (m.bellman_error(&(&v + &e)) - m.bellman_error(&(&v - &e))) / (2.0 * h);
            prop_assert!(g.abs() < 1e-6, "feature {}: gradient {}", z, g);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn robustness_checks_respect_the_implication_chain(seed in any::<u64>()) {
        let c = case(seed);
        // A refuting rewiring is also a generalized rewiring, and the
        // behavior-averaged rewiring is a rewiring.
        let rr = check_rewire_robust(&c.env, 16, seed, CAP).unwrap();
        if let Some(w) = &rr.witness {
            prop_assert_eq!(is_rewiring(&w.rewiring, &c.env).unwrap(), None);
            prop_assert_eq!(is_generalized_rewiring(&w.rewiring, &c.env).unwrap(), None);
        }
        let prr = check_pi_rewire_robust(&c.env, &c.behavior, CAP).unwrap();
        if let Some(w) = &prr.witness {
            prop_assert_eq!(is_rewiring(&w.rewiring, &c.env).unwrap(), None);
        }

        let realizable = random_realizable_env(&mut stream_rng(seed, 4), &small()).unwrap();
        let b = random_behavior(&mut stream_rng(seed, 5), realizable.n_features(), realizable.n_options());
        prop_assert_ne!(check_generalized_rewire_robust(&realizable, 16, seed, CAP).unwrap().kind, VerdictKind::Refuted);
        prop_assert_ne!(check_rewire_robust(&realizable, 16, seed, CAP).unwrap().kind, VerdictKind::Refuted);
        prop_assert_eq!(check_pi_rewire_robust(&realizable, &b, CAP).unwrap().kind, VerdictKind::ExactPass);
    }
}
