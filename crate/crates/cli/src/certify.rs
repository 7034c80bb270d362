use std::path::PathBuf;

use serde_json::{json, Value};

use commitq::dp::{optimal_reactive, qstar_realizability};
use commitq::env::{is_proper, DEFAULT_ENUMERATION_CAP};
use commitq::format::write_env;
use commitq::learn::{greedy, is_greedy_unique, solve_fixed_point, OptimalityOracle};
use commitq::quasi::{entrance_dims, spectral_radius_intra};
use commitq::rewire::{
    check_generalized_rewire_robust, check_pi_rewire_robust, check_rewire_robust, RewiringVerdict, DEFAULT_SAMPLES,
};
use commitq::risk::{RiskModel, DEFAULT_EPSILON};
use commitq::Environment;

use crate::inputs::{load_behavior, load_env, policy_names};
use crate::{emit, CliError};

#[derive(clap::Args)]
pub struct Args {
    /// Zoo reference (e.g. `corridor:k=5`) or environment file.
    #[arg(long)]
    pub env: String,
    /// Behavior for the behavior-averaged checks (see README for specs).
    #[arg(long)]
    pub behavior: Option<String>,
    /// Random rewirings tried beyond the structured candidates.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Seed of the random rewiring search.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest number of reactive policies to enumerate.
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    pub cap: u64,
    /// Report file (JSON); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A section that could not be computed is reported with its reason.
fn section(r: commitq::Result<Value>) -> Value {
    r.unwrap_or_else(|e| json!({ "skipped": e.to_string() }))
}

fn verdict_json(env: &Environment, v: &RewiringVerdict) -> Value {
    json!({
        "verdict": v.kind.to_string(),
        "samples_tried": v.samples_tried,
        "skipped_improper": v.skipped_improper,
        "witness": v.witness.as_ref().map(|w| json!({
            "policy": policy_names(env, &w.policy),
            "rewired_return": w.rewired_return,
            "original_return": w.original_return,
            "optimal_return": w.optimal_return,
            "rewiring": write_env(&w.rewiring),
        })),
    })
}

pub fn report(args: &Args) -> Result<Value, CliError> {
    let loaded = load_env(&args.env)?;
    let behavior = load_behavior(args.behavior.as_deref(), &loaded)?;
    let env = &loaded.env;
    let cap = args.cap;
    let names = |v: &[String]| Value::from(v.to_vec());

    let proper = section(is_proper(env, cap).map(|p| {
        json!({
            "proper": p.proper,
            "counterexample": p.counterexample.map(|(pol, x)| json!({
                "policy": policy_names(env, &pol),
                "state": env.state_names()[x],
            })),
        })
    }));
    let radius = section((|| {
        let mut worst: f64 = 0.0;
        for z in 0..env.n_features() {
            for o in 0..env.n_options() {
                worst = worst.max(spectral_radius_intra(env, z, o)?);
            }
        }
        Ok(json!(worst))
    })());
    let dims = entrance_dims(env);
    let realizable = section(qstar_realizability(env).map(|r| {
        json!({
            "realizable": r.realizable,
            "violation": r.violation.map(|(z, u)| json!({
                "feature": env.feature_names()[z],
                "action": env.action_names()[u],
            })),
        })
    }));
    let optimal = section(optimal_reactive(env, cap).map(|o| {
        json!({
            "value": o.value,
            "policies": o.policies.iter().map(|p| policy_names(env, p)).collect::<Vec<_>>(),
        })
    }));
    let pi_rr = section(check_pi_rewire_robust(env, &behavior, cap).map(|v| verdict_json(env, &v)));
    let rr = section(check_rewire_robust(env, args.samples, args.seed, cap).map(|v| verdict_json(env, &v)));
    let grr =
        section(check_generalized_rewire_robust(env, args.samples, args.seed, cap).map(|v| verdict_json(env, &v)));
    let fixed_point = section((|| {
        let q = solve_fixed_point(env, &behavior)?;
        let oracle = OptimalityOracle::new(env, cap)?;
        let g = greedy(&q);
        Ok(json!({
            "greedy_policy": policy_names(env, &g),
            "greedy_unique": is_greedy_unique(&q),
            "greedy_optimal": oracle.is_optimal(&g),
        }))
    })());
    let risk = section((|| {
        let best = optimal_reactive(env, cap)?;
        let policy = &best.policies[0];
        let m = RiskModel::for_policy(env, policy, DEFAULT_EPSILON)?;
        let ve = m.minimize_value_error();
        let be = m.minimize_bellman_error()?;
        let vr = m.minimize_value_risk();
        let br = m.minimize_bellman_risk()?;
        let rows: Vec<Value> = (0..env.n_features())
            .map(|z| {
                json!({
                    "feature": env.feature_names()[z],
                    "value_error_minimizer": ve[z],
                    "bellman_error_minimizer": be[z],
                    "value_risk_minimizer": vr[z],
                    "bellman_risk_minimizer": br[z],
                })
            })
            .collect();
        Ok(json!({
            "policy": policy_names(env, policy),
            "behavior_epsilon": DEFAULT_EPSILON,
            "oracle_only": ["value_error_minimizer", "bellman_error_minimizer"],
            "features": rows,
        }))
    })());

    Ok(json!({
        "env": loaded.name,
        "states": names(env.state_names()),
        "actions": names(env.action_names()),
        "features": names(env.feature_names()),
        "options": env.options().iter().map(|o| o.name().to_string()).collect::<Vec<_>>(),
        "behavior": args.behavior.clone().unwrap_or_else(|| "paired".into()),
        "proper": proper,
        "max_intra_feature_spectral_radius": radius,
        "quasi_markov": {
            "quasi_markov": dims.iter().all(|&d| d <= 1),
            "entrance_dims": env.feature_names().iter().cloned().zip(dims.iter().copied())
                .map(|(f, d)| json!({ "feature": f, "dim": d })).collect::<Vec<_>>(),
        },
        "qstar_realizable": realizable,
        "optimal_reactive": optimal,
        "pi_rewire_robust": pi_rr,
        "rewire_robust": rr,
        "generalized_rewire_robust": grr,
        "fixed_point": fixed_point,
        "risk_minimizers": risk,
    }))
}

pub fn run(args: &Args) -> Result<(), CliError> {
    let r = report(args)?;
    let text = serde_json::to_string_pretty(&r).expect("report serializes") + "\n";
    emit(args.out.as_deref(), &text)
}
