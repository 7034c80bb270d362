//! Resolution of environment and behavior references given on the command line.

use std::path::Path;

use commitq::format::read_env;
use commitq::zoo;
use commitq::{BehaviorPolicy, Environment, ReactivePolicy};

use crate::CliError;

/// An environment together with the reference it was loaded from and the
/// behavior it ships with, if any.
pub struct LoadedEnv {
    pub name: String,
    pub env: Environment,
    pub paired: Option<BehaviorPolicy>,
}

/// Loads a file when `reference` names an existing path, otherwise parses it
/// as a zoo reference such as `corridor:k=5`.
pub fn load_env(reference: &str) -> Result<LoadedEnv, CliError> {
    let path = Path::new(reference);
    if path.is_file() {
        let env = read_env(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        return Ok(LoadedEnv {
            name: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| reference.to_string()),
            env,
            paired: None,
        });
    }
    let (env, paired) = zoo::from_ref(reference).map_err(|e| CliError::input(format!("--env {reference}: {e}")))?;
    Ok(LoadedEnv {
        name: reference.to_string(),
        env,
        paired,
    })
}

/// Behavior specs:
/// - `paired` (default): the environment's own behavior, else uniform
/// - `uniform`
/// - `up-right:<delta>`: `up` with probability `delta`, `right` otherwise
/// - `mix:<o,o,...>:<eps>`: the reactive policy with the given option per
///   feature, mixed with uniform at rate `eps`
/// - `rows:<p,p,...>;<p,p,...>`: one probability row per feature
pub fn load_behavior(spec: Option<&str>, loaded: &LoadedEnv) -> Result<BehaviorPolicy, CliError> {
    let env = &loaded.env;
    let (nz, no) = (env.n_features(), env.n_options());
    let bad = |msg: String| CliError::input(format!("--behavior {}: {msg}", spec.unwrap_or("paired")));
    let spec = spec.unwrap_or("paired");
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("'{s}' is not a number")));
    match kind {
        "paired" => Ok(loaded.paired.clone().unwrap_or_else(|| BehaviorPolicy::uniform(nz, no))),
        "uniform" => Ok(BehaviorPolicy::uniform(nz, no)),
        "up-right" => zoo::up_right_behavior(env, num(rest)?).map_err(|e| bad(e.to_string())),
        "mix" => {
            let (choices, eps) = rest
                .rsplit_once(':')
                .ok_or_else(|| bad("expected mix:<options>:<eps>".into()))?;
            let choices = choices
                .split(',')
                .map(|c| {
                    let c = c.trim();
                    env.option_index(c)
                        .or_else(|| c.parse::<usize>().ok().filter(|&i| i < no))
                        .ok_or_else(|| bad(format!("unknown option '{c}'")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if choices.len() != nz {
                return Err(bad(format!("{} options given for {nz} features", choices.len())));
            }
            BehaviorPolicy::epsilon_mix(&ReactivePolicy::new(choices), num(eps)?, no).map_err(|e| bad(e.to_string()))
        }
        "rows" => {
            let rows = rest
                .split(';')
                .map(|r| r.split(',').map(num).collect::<Result<Vec<f64>, _>>())
                .collect::<Result<Vec<_>, _>>()?;
            if rows.len() != nz || rows.iter().any(|r| r.len() != no) {
                return Err(bad(format!("expected {nz} rows of {no} probabilities")));
            }
            BehaviorPolicy::new(rows).map_err(|e| bad(e.to_string()))
        }
        _ => Err(bad(format!("unknown behavior kind '{kind}'"))),
    }
}

/// `feature=option` pairs of a reactive policy.
pub fn policy_names(env: &Environment, policy: &ReactivePolicy) -> Vec<String> {
    policy
        .choices()
        .iter()
        .enumerate()
        .map(|(z, &o)| format!("{}={}", env.feature_names()[z], env.option(o).name()))
        .collect()
}
