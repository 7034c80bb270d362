//! Exact dynamic programming: policy evaluation, enumeration of reactive
//! policies, and value iteration on the underlying MDP.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::env::{
    check_policy, policy_count, policy_exit_rewards, policy_kernel, Environment, ReactivePolicy,
};
use crate::error::{Error, Result};
use crate::linalg::solve;

/// Tie tolerance for optimal policy sets.
pub const TIE_TOL: f64 = 1e-9;

/// Maximum number of value-iteration sweeps.
pub const MAX_SWEEPS: usize = 100_000;

/// Expected one-step reward from each state: entering a nonterminal state
/// pays its feature reward, terminating pays the exit reward.
fn one_step_rewards(env: &Environment, t_pi: &DMatrix<f64>, policy: &ReactivePolicy) -> Result<DVector<f64>> {
    Ok(t_pi.transpose() * env.state_rewards() + policy_exit_rewards(env, policy)?)
}

/// Value of a reactive policy at every state, from the Bellman equation
/// `v = T_pi^T (Phi^T r + v) + b_pi`.
pub fn policy_value(env: &Environment, policy: &ReactivePolicy) -> Result<DVector<f64>> {
    check_policy(env, policy)?;
    let t = policy_kernel(env, policy)?;
    let b = one_step_rewards(env, &t, policy)?;
    let n = env.n_states();
    let a = DMatrix::identity(n, n) - t.transpose();
    let v = solve(&a, &b, &format!("policy evaluation for {policy} (improper policy?)"))?;
    let residual = (&v - (t.transpose() * &v + &b)).amax();
    if residual > 1e-10 * (1.0 + v.amax()) {
        return Err(Error::Singular(format!(
            "policy evaluation for {policy}: Bellman residual {residual:e}"
        )));
    }
    Ok(v)
}

/// States reachable from `p0` when following `policy`.
pub fn reachable_under(env: &Environment, t_pi: &DMatrix<f64>) -> Vec<bool> {
    let n = env.n_states();
    let mut seen: Vec<bool> = (0..n).map(|x| env.p0()[x] > 0.0).collect();
    let mut stack: Vec<usize> = (0..n).filter(|&x| seen[x]).collect();
    while let Some(x) = stack.pop() {
        for y in 0..n {
            if !seen[y] && t_pi[(y, x)] > 0.0 {
                seen[y] = true;
                stack.push(y);
            }
        }
    }
    seen
}

/// `J(pi) = p0^T v_pi`. Only the states reachable under `pi` are solved for,
/// so policies that are improper elsewhere still get a return.
pub fn policy_return(env: &Environment, policy: &ReactivePolicy) -> Result<f64> {
    check_policy(env, policy)?;
    let t = policy_kernel(env, policy)?;
    let b = one_step_rewards(env, &t, policy)?;
    let keep: Vec<usize> = reachable_under(env, &t)
        .iter()
        .enumerate()
        .filter_map(|(x, r)| r.then_some(x))
        .collect();
    let m = keep.len();
    let a = DMatrix::from_fn(m, m, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - t[(keep[j], keep[i])]
    });
    let rhs = DVector::from_fn(m, |i, _| b[keep[i]]);
    let v = solve(&a, &rhs, &format!("return of {policy} (improper policy?)"))?;
    Ok(keep.iter().enumerate().map(|(i, &x)| env.p0()[x] * v[i]).sum())
}

/// The best reactive return and every policy attaining it within [`TIE_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSet {
    pub value: f64,
    pub policies: Vec<ReactivePolicy>,
}

impl OptimalSet {
    pub fn contains(&self, policy: &ReactivePolicy) -> bool {
        self.policies.contains(policy)
    }
}

/// Returns of every reactive policy, in policy-index order.
pub fn all_returns(env: &Environment, cap: u64) -> Result<Vec<f64>> {
    let count = policy_count(env, cap)?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let p = ReactivePolicy::from_index(i, env.n_features(), env.n_options());
            policy_return(env, &p)
        })
        .collect()
}

/// Optimal reactive policies by exhaustive enumeration.
pub fn optimal_reactive(env: &Environment, cap: u64) -> Result<OptimalSet> {
    let returns = all_returns(env, cap)?;
    let value = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let policies = returns
        .iter()
        .enumerate()
        .filter(|(_, r)| **r >= value - TIE_TOL)
        .map(|(i, _)| ReactivePolicy::from_index(i as u64, env.n_features(), env.n_options()))
        .collect();
    Ok(OptimalSet { value, policies })
}

/// Result of value iteration on the underlying MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct QStar {
    /// `|X| x |U|` optimal action values.
    pub q: DMatrix<f64>,
    /// Sup-norm change of each sweep.
    pub residuals: Vec<f64>,
}

impl QStar {
    pub fn state_values(&self) -> DVector<f64> {
        DVector::from_fn(self.q.nrows(), |x, _| self.q.row(x).max())
    }

    /// Greedy action per state, lowest index on ties within [`TIE_TOL`].
    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.q.nrows())
            .map(|x| {
                let best = self.q.row(x).max();
                (0..self.q.ncols()).find(|&u| self.q[(x, u)] >= best - TIE_TOL).unwrap()
            })
            .collect()
    }
}

/// `q*(x, u) = sum_x' T'_u[x', x] (r(x') + max_u' q*(x', u'))` by value
/// iteration on the fully observed MDP (primitive actions, not options).
pub fn mdp_q_star(env: &Environment) -> Result<QStar> {
    mdp_q_star_with(env, 1e-12, MAX_SWEEPS)
}

pub fn mdp_q_star_with(env: &Environment, tol: f64, max_sweeps: usize) -> Result<QStar> {
    let n = env.n_states();
    let n_actions = env.n_actions();
    let r = env.state_rewards();
    let exit_rewards: Vec<DVector<f64>> = (0..n_actions)
        .map(|u| {
            let term = env.termination_matrix(u);
            let tr = DVector::from_iterator(env.n_terminals(), env.terminals().iter().map(|t| t.reward));
            term.transpose() * tr
        })
        .collect();
    let kt: Vec<DMatrix<f64>> = env.kernels().iter().map(|k| k.transpose()).collect();
    let mut q = DMatrix::zeros(n, n_actions);
    let mut residuals = Vec::new();
    for _ in 0..max_sweeps {
        let v = DVector::from_fn(n, |x, _| q.row(x).max());
        let target = &r + &v;
        let mut next = DMatrix::zeros(n, n_actions);
        for u in 0..n_actions {
            next.set_column(u, &(&kt[u] * &target + &exit_rewards[u]));
        }
        let change = (&next - &q).amax();
        q = next;
        residuals.push(change);
        if !change.is_finite() {
            break;
        }
        if change <= tol {
            return Ok(QStar { q, residuals });
        }
    }
    Err(Error::NonConvergence {
        iterations: residuals.len(),
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

/// Outcome of [`qstar_realizability`].
#[derive(Debug, Clone, PartialEq)]
pub struct Realizability {
    pub realizable: bool,
    /// `|Z| x |U|` common values when realizable.
    pub witness: Option<DMatrix<f64>>,
    /// First `(feature, action)` whose states disagree.
    pub violation: Option<(usize, usize)>,
}

/// Whether `q*(x, u)` depends on `x` only through `phi(x)`, within 1e-8.
pub fn qstar_realizability(env: &Environment) -> Result<Realizability> {
    let qs = mdp_q_star(env)?;
    let fm = env.features();
    let mut witness = DMatrix::zeros(env.n_features(), env.n_actions());
    for z in 0..env.n_features() {
        let members = fm.states_of(z);
        for u in 0..env.n_actions() {
            let first = qs.q[(members[0], u)];
            if members.iter().any(|&x| (qs.q[(x, u)] - first).abs() > 1e-8) {
                return Ok(Realizability {
                    realizable: false,
                    witness: None,
                    violation: Some((z, u)),
                });
            }
            witness[(z, u)] = first;
        }
    }
    Ok(Realizability {
        realizable: true,
        witness: Some(witness),
        violation: None,
    })
}
