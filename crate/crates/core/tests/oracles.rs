//! Exact quantities checked against independent computations: simulation,
//! series expansions, brute-force enumeration and power iteration.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use commitq::chain::{build_chain, stationary, stationary_of, Walker};
use commitq::dp::{mdp_q_star, optimal_reactive, policy_return, policy_value};
use commitq::env::{policy_exit_rewards, policy_kernel, Sampler, DEFAULT_ENUMERATION_CAP as CAP};
use commitq::learn::{q_learning_traced, BehaviorMode, RunConfig, StepSchedule};
use commitq::random::{random_behavior, random_env, random_policy, Shape};
use commitq::rewire::pi_entrances;
use commitq::rng::stream_rng;
use commitq::{Environment, Next, OptionDist, ReactivePolicy};

fn small() -> Shape {
    Shape {
        max_states: 6,
        max_features: 3,
        max_actions: 2,
        sparsity: 0.4,
    }
}

fn instance(seed: u64, i: u64) -> Environment {
    random_env(&mut stream_rng(seed, i), &small()).unwrap()
}

#[test]
fn policy_return_matches_monte_carlo() {
    for i in 0..5 {
        let env = instance(100, i);
        let mut rng = stream_rng(101, i);
        let policy = random_policy(&mut rng, env.n_features(), env.n_options());
        let exact = policy_return(&env, &policy).unwrap();
        let sampler = Sampler::new(&env);
        let episodes = 40_000;
        let returns: Vec<f64> = (0..episodes)
            .map(|_| {
                let mut x = sampler.initial_state(&mut rng);
                let mut g = 0.0;
                loop {
                    let s = sampler.step(x, policy.option_at(env.feature_of(x)), &mut rng);
                    g += s.reward;
                    match s.next {
                        Next::State(y) => x = y,
                        Next::Terminal(_) => break g,
                    }
                }
            })
            .collect();
        let mean = returns.iter().sum::<f64>() / episodes as f64;
        let var = returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (episodes - 1) as f64;
        let se = (var / episodes as f64).sqrt();
        assert!((mean - exact).abs() <= 4.0 * se + 1e-12, "instance {i}: {mean} vs {exact} (se {se})");
    }
}

#[test]
fn policy_value_matches_neumann_series() {
    for i in 0..20 {
        let env = instance(110, i);
        let policy = random_policy(&mut stream_rng(111, i), env.n_features(), env.n_options());
        let t = policy_kernel(&env, &policy).unwrap().transpose();
        let b = &t * env.state_rewards() + policy_exit_rewards(&env, &policy).unwrap();
        let mut term = b.clone();
        let mut sum = b;
        while term.amax() > 1e-15 {
            term = &t * term;
            sum += &term;
        }
        let v = policy_value(&env, &policy).unwrap();
        assert!((v - sum).amax() < 1e-10, "instance {i}");
    }
}

#[test]
fn value_iteration_matches_enumeration_of_state_policies() {
    for i in 0..20 {
        let env = instance(120, i);
        let n = env.n_states();
        let deterministic = (0..env.n_actions())
            .map(|u| OptionDist::deterministic(format!("u{u}"), env.n_actions(), u))
            .collect();
        let mdp = env
            .with_features(
                commitq::FeatureMap::identity(n),
                (0..n).map(|x| env.reward(env.feature_of(x))).collect(),
                (0..n).map(|x| format!("x{x}")).collect(),
            )
            .unwrap()
            .with_options(deterministic)
            .unwrap();
        let best = optimal_reactive(&mdp, CAP).unwrap().value;
        let q = mdp_q_star(&env).unwrap();
        let v = q.state_values();
        assert!((env.p0().dot(&v) - best).abs() < 1e-8, "instance {i}");
        // Every state-policy value is dominated by v*.
        for k in 0..20u64 {
            let p = ReactivePolicy::from_index(k % (env.n_actions() as u64).pow(n as u32), n, env.n_actions());
            let vp = policy_value(&mdp, &p).unwrap();
            assert!((0..n).all(|x| vp[x] <= v[x] + 1e-8));
        }
    }
}

#[test]
fn stationary_distribution_matches_power_iteration() {
    for i in 0..20 {
        let env = instance(130, i);
        let b = random_behavior(&mut stream_rng(131, i), env.n_features(), env.n_options());
        let chain = build_chain(&env, &b).unwrap();
        let mu = stationary(&chain).unwrap().mu;
        let m = chain.len();
        // Lazy chain, so the iteration converges even for periodic kernels.
        let lazy = (DMatrix::identity(m, m) + chain.kernel.transpose()) * 0.5;
        let mut p = DVector::from_element(m, 1.0 / m as f64);
        for _ in 0..100_000 {
            let next = &lazy * &p;
            let done = (&next - &p).amax() < 1e-15;
            p = next;
            if done {
                break;
            }
        }
        assert!((p - mu).amax() < 1e-10, "instance {i}");
    }
}

#[test]
fn behavior_entrances_match_simulated_entrances() {
    for i in 0..4 {
        let env = instance(140, i);
        let b = random_behavior(&mut stream_rng(141, i), env.n_features(), env.n_options());
        let dist = stationary_of(&env, &b).unwrap();
        let sigma = pi_entrances(&env, &dist).unwrap();
        let mut counts = DMatrix::<f64>::zeros(env.n_states(), env.n_features());
        let mut walker = Walker::new(&env, &b, true).unwrap();
        let mut rng = stream_rng(142, i);
        let mut fresh = true;
        for _ in 0..400_000 {
            let t = walker.step(&mut rng);
            if fresh {
                counts[(t.xi.x, t.feature)] += 1.0;
            }
            fresh = t.next_feature.is_none();
            if let (Next::State(y), Some(zy)) = (t.xi.next, t.next_feature) {
                if zy != t.feature {
                    counts[(y, zy)] += 1.0;
                }
            }
        }
        for z in 0..env.n_features() {
            let total: f64 = counts.column(z).sum();
            if total < 1000.0 {
                continue;
            }
            for x in 0..env.n_states() {
                let p = sigma[(x, z)];
                let freq = counts[(x, z)] / total;
                let se = (p * (1.0 - p) / total).sqrt().max(1e-9);
                assert!((freq - p).abs() <= 4.5 * se, "instance {i}, feature {z}, state {x}: {freq} vs {p}");
            }
        }
    }
}

#[test]
fn learner_visits_exactly_the_support_of_the_tuple_chain() {
    for i in 0..5 {
        let env = instance(150, i);
        let b = random_behavior(&mut stream_rng(151, i), env.n_features(), env.n_options());
        let dist = stationary_of(&env, &b).unwrap();
        let config = RunConfig {
            total_steps: 300_000,
            committed: true,
            behavior: BehaviorMode::Fixed(b),
            alpha: StepSchedule::from_anchors(0.1, 0.01).unwrap(),
            checkpoints: vec![],
            snapshots: false,
        };
        let mut seen = HashSet::new();
        q_learning_traced(&env, &config, &mut stream_rng(152, i), |_, v| {
            seen.insert(commitq::chain::Xi {
                x: v.x,
                option: v.option,
                next: v.next,
            });
        })
        .unwrap();
        let support: HashSet<_> = dist.tuples.iter().copied().collect();
        assert!(seen.is_subset(&support), "instance {i}: visited a tuple outside the chain");
        for (xi, &m) in dist.tuples.iter().zip(dist.mu.iter()) {
            if m > 1e-4 {
                assert!(seen.contains(xi), "instance {i}: {xi:?} with mass {m} never visited");
            }
        }
    }
}
