//! Value error, Bellman error, value risk and Bellman risk of feature-value
//! functions, their minimizers, and trace-based estimators of the risks.
//!
//! The errors condition on latent states and are only computable with the
//! environment at hand; the risks condition on features and can be
//! estimated from observed traces.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::builder::EnvBuilder;
use crate::chain::{feature_kernel, stationary_of, Walker};
use crate::dp::policy_value;
use crate::env::{policy_exit_rewards, policy_kernel, BehaviorPolicy, Environment, ReactivePolicy};
use crate::error::{Error, Result};
use crate::linalg::solve;

/// Exploration used to evaluate deterministic policies.
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Fraction of a trace discarded before estimating.
pub const BURN_IN: f64 = 0.1;
/// Number of batches for batch-means standard errors.
pub const BATCHES: usize = 20;

/// Exact ingredients of the four objectives for one policy.
#[derive(Debug, Clone)]
pub struct RiskModel {
    policy: ReactivePolicy,
    phi: DMatrix<f64>,
    rewards: DVector<f64>,
    /// Stationary state marginal of the committed behavior.
    mu_x: DVector<f64>,
    /// Feature marginal.
    mu_z: DVector<f64>,
    v_pi: DVector<f64>,
    t_pi: DMatrix<f64>,
    b_pi: DVector<f64>,
    /// `mu(z' | z, pi(z))` over features.
    k_pi: DMatrix<f64>,
    /// Expected terminal reward given `(z, pi(z))`.
    e_pi: DVector<f64>,
}

impl RiskModel {
    /// Objectives of `policy` under the stationary distribution of the
    /// committed chain of `behavior`.
    pub fn new(env: &Environment, policy: &ReactivePolicy, behavior: &BehaviorPolicy) -> Result<Self> {
        let dist = stationary_of(env, behavior)?;
        let fk = feature_kernel(env, &dist);
        let phi = env.features().matrix();
        let mu_x = dist.state_marginal();
        let mu_z = &phi * &mu_x;
        let nz = env.n_features();
        let terminal_rewards: Vec<f64> = env.terminals().iter().map(|t| t.reward).collect();
        let mut k_pi = DMatrix::zeros(nz, nz);
        let mut e_pi = DVector::zeros(nz);
        for z in 0..nz {
            let o = policy.option_at(z);
            if !fk.has_mass(z, o) {
                continue;
            }
            k_pi.set_column(z, &fk.transitions(o).column(z));
            let term = fk.terminations(o);
            e_pi[z] = (0..term.nrows()).map(|t| term[(t, z)] * terminal_rewards[t]).sum();
        }
        Ok(Self {
            policy: policy.clone(),
            rewards: DVector::from_column_slice(&env.rewards()[..nz]),
            v_pi: policy_value(env, policy)?,
            t_pi: policy_kernel(env, policy)?,
            b_pi: policy_exit_rewards(env, policy)?,
            phi,
            mu_x,
            mu_z,
            k_pi,
            e_pi,
        })
    }

    /// A deterministic policy evaluated through its `epsilon`-mixture with
    /// the uniform behavior.
    pub fn for_policy(env: &Environment, policy: &ReactivePolicy, epsilon: f64) -> Result<Self> {
        let b = BehaviorPolicy::epsilon_mix(policy, epsilon, env.n_options())?;
        Self::new(env, policy, &b)
    }

    pub fn policy(&self) -> &ReactivePolicy {
        &self.policy
    }

    pub fn state_marginal(&self) -> &DVector<f64> {
        &self.mu_x
    }

    pub fn feature_marginal(&self) -> &DVector<f64> {
        &self.mu_z
    }

    pub fn state_values(&self) -> &DVector<f64> {
        &self.v_pi
    }

    /// `E_mu[R_t | z_t = z]`, 0 for features without mass.
    pub fn conditional_return(&self) -> DVector<f64> {
        let weighted = &self.phi * self.mu_x.component_mul(&self.v_pi);
        DVector::from_fn(self.mu_z.len(), |z, _| {
            if self.mu_z[z] > 0.0 {
                weighted[z] / self.mu_z[z]
            } else {
                0.0
            }
        })
    }

    /// `E_mu[r(z') + v(z') | z, pi(z)]` for every feature.
    fn feature_backup(&self, v: &DVector<f64>) -> DVector<f64> {
        self.k_pi.transpose() * (&self.rewards + v) + &self.e_pi
    }

    /// `E_pi[r(z') + v(z') | x]` for every state.
    fn state_backup(&self, v: &DVector<f64>) -> DVector<f64> {
        self.t_pi.transpose() * (self.phi.transpose() * (&self.rewards + v)) + &self.b_pi
    }

    fn lift(&self, v: &DVector<f64>) -> DVector<f64> {
        self.phi.transpose() * v
    }

    /// Requires latent states.
    pub fn value_error(&self, v: &DVector<f64>) -> f64 {
        let d = self.lift(v) - &self.v_pi;
        self.mu_x.dot(&d.component_mul(&d))
    }

    /// Requires latent states.
    pub fn bellman_error(&self, v: &DVector<f64>) -> f64 {
        let d = self.lift(v) - self.state_backup(v);
        self.mu_x.dot(&d.component_mul(&d))
    }

    pub fn value_risk(&self, v: &DVector<f64>) -> f64 {
        let d = v - self.conditional_return();
        self.mu_z.dot(&d.component_mul(&d))
    }

    pub fn bellman_risk(&self, v: &DVector<f64>) -> f64 {
        let d = v - self.feature_backup(v);
        self.mu_z.dot(&d.component_mul(&d))
    }

    /// The `mu`-weighted average of `v_pi` over each feature.
    pub fn minimize_value_error(&self) -> DVector<f64> {
        self.conditional_return()
    }

    pub fn minimize_value_risk(&self) -> DVector<f64> {
        self.conditional_return()
    }

    /// Solves the feature Bellman equation `v = K_pi^T (r + v) + e_pi`.
    pub fn minimize_bellman_risk(&self) -> Result<DVector<f64>> {
        let nz = self.mu_z.len();
        let a = DMatrix::identity(nz, nz) - self.k_pi.transpose();
        let b = self.k_pi.transpose() * &self.rewards + &self.e_pi;
        let v = solve(&a, &b, "feature Bellman equation")?;
        let residual = (&v - self.feature_backup(&v)).amax();
        if residual > 1e-10 * (1.0 + v.amax()) {
            return Err(Error::Singular(format!("feature Bellman residual {residual:e}")));
        }
        Ok(v)
    }

    /// Weighted least squares over `v`. Features without mass do not enter
    /// the objective and are set to 0.
    pub fn minimize_bellman_error(&self) -> Result<DVector<f64>> {
        let nz = self.mu_z.len();
        let live: Vec<usize> = (0..nz).filter(|&z| self.mu_z[z] > 0.0).collect();
        // Residual at x is a_x^T v - c_x.
        let a = self.phi.transpose() - self.t_pi.transpose() * self.phi.transpose();
        let a = a.select_columns(&live);
        let c = self.state_backup(&DVector::zeros(nz));
        let w = DMatrix::from_diagonal(&self.mu_x);
        let gram = a.transpose() * &w * &a;
        let rhs = a.transpose() * &w * c;
        let sol = solve(&gram, &rhs, "Bellman error normal equations")?;
        let mut v = DVector::zeros(nz);
        for (i, &z) in live.iter().enumerate() {
            v[z] = sol[i];
        }
        Ok(v)
    }
}

/// One observed step: features, option and reward only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedStep {
    pub feature: usize,
    pub option: usize,
    /// `None` when the episode ended.
    pub next_feature: Option<usize>,
    pub reward: f64,
}

/// Runs the committed behavior for `steps` steps and keeps what an agent sees.
pub fn observe<R: Rng + ?Sized>(
    env: &Environment,
    behavior: &BehaviorPolicy,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<ObservedStep>> {
    let mut w = Walker::new(env, behavior, true)?;
    Ok((0..steps)
        .map(|_| {
            let t = w.step(rng);
            ObservedStep {
                feature: t.feature,
                option: t.xi.option,
                next_feature: t.next_feature,
                reward: t.reward,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    /// Whether two estimates agree within `k` combined standard errors.
    pub fn agrees_with(&self, other: &Estimate, k: f64) -> bool {
        let se = (self.std_error.powi(2) + other.std_error.powi(2)).sqrt();
        (self.value - other.value).abs() <= k * se
    }
}

fn after_burn_in<T>(trace: &[T]) -> Result<&[T]> {
    let rest = &trace[(trace.len() as f64 * BURN_IN) as usize..];
    if rest.is_empty() {
        return Err(Error::InvalidArgument("empty trace".into()));
    }
    Ok(rest)
}

fn batch_estimate(trace: &[ObservedStep], f: impl Fn(&[ObservedStep]) -> Result<f64>) -> Result<Estimate> {
    let value = f(trace)?;
    if trace.len() < 2 * BATCHES {
        return Ok(Estimate { value, std_error: f64::NAN });
    }
    let size = trace.len() / BATCHES;
    let batches: Vec<f64> = (0..BATCHES)
        .map(|b| f(&trace[b * size..(b + 1) * size]))
        .collect::<Result<_>>()?;
    let mean = batches.iter().sum::<f64>() / BATCHES as f64;
    let var = batches.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
    Ok(Estimate {
        value,
        std_error: (var / BATCHES as f64).sqrt(),
    })
}

/// Running mean `(1/t) sum f(z_tau)` after burn-in.
pub fn feature_average(trace: &[ObservedStep], f: impl Fn(usize) -> f64) -> Result<Estimate> {
    let trace = after_burn_in(trace)?;
    batch_estimate(trace, |s| Ok(s.iter().map(|o| f(o.feature)).sum::<f64>() / s.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiskKind {
    Value,
    Bellman,
}

/// Per-feature mean of `target` over the steps selected by `keep`.
fn conditional_means(
    n_features: usize,
    steps: impl Iterator<Item = (usize, f64)>,
) -> (Vec<f64>, Vec<usize>) {
    let mut sum = vec![0.0; n_features];
    let mut count = vec![0usize; n_features];
    for (z, y) in steps {
        sum[z] += y;
        count[z] += 1;
    }
    let mean = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    (mean, count)
}

fn plug_in(trace: &[ObservedStep], kind: RiskKind, v: &DVector<f64>, policy: &ReactivePolicy) -> Result<f64> {
    let nz = v.len();
    let means = match kind {
        RiskKind::Bellman => {
            let targets = trace
                .iter()
                .filter(|o| o.option == policy.option_at(o.feature))
                .map(|o| (o.feature, o.reward + o.next_feature.map_or(0.0, |z| v[z])));
            conditional_means(nz, targets).0
        }
        RiskKind::Value => {
            // Return-to-go, computed backwards; steps of the unfinished last
            // episode have no return and are skipped.
            let mut returns = Vec::with_capacity(trace.len());
            let mut acc: Option<f64> = None;
            for o in trace.iter().rev() {
                acc = match o.next_feature {
                    None => Some(o.reward),
                    Some(_) => acc.map(|a| a + o.reward),
                };
                returns.push(acc.map(|a| (o.feature, a)));
            }
            conditional_means(nz, returns.into_iter().flatten()).0
        }
    };
    let mut total = 0.0;
    for o in trace {
        total += (v[o.feature] - means[o.feature]).powi(2);
    }
    Ok(total / trace.len() as f64)
}

/// Plug-in estimate of a risk from an observed trace: conditional
/// expectations are replaced by per-feature sample means, then
/// `f(z) = (v(z) - mean(z))^2` is averaged along the trace. The Bellman
/// target conditions on steps that follow `policy`.
pub fn trajectory_risk_estimator(
    trace: &[ObservedStep],
    kind: RiskKind,
    v: &DVector<f64>,
    policy: &ReactivePolicy,
) -> Result<Estimate> {
    let trace = after_burn_in(trace)?;
    batch_estimate(trace, |s| plug_in(s, kind, v, policy))
}

/// Two autonomous environments with the same law of feature sequences.
/// Both have features `A` (reward 0) and `B` (reward 1) and end each step
/// with probability 0.1. In the first, each feature is one state and the
/// next feature is uniform. In the second, `B` is split into `b1`, which
/// always moves to `A`, and `b2`, which always stays in `B`; every entrance
/// into `B` lands on either with probability 1/2.
pub fn learnability_pair() -> Result<(Environment, Environment)> {
    let go = 0.9;
    let mut one = EnvBuilder::new(["a", "b"], ["step"]);
    one.assign("a", "A")?.assign("b", "B")?;
    one.reward("A", 0.0)?.reward("B", 1.0)?;
    one.start("a", 0.5)?.start("b", 0.5)?;
    for s in ["a", "b"] {
        one.transition("step", s, "a", go / 2.0)?;
        one.transition("step", s, "b", go / 2.0)?;
    }
    let mut two = EnvBuilder::new(["a", "b1", "b2"], ["step"]);
    two.assign("a", "A")?.assign("b1", "B")?.assign("b2", "B")?;
    two.reward("A", 0.0)?.reward("B", 1.0)?;
    two.start("a", 0.5)?.start("b1", 0.25)?.start("b2", 0.25)?;
    two.transition("step", "a", "a", go / 2.0)?;
    two.transition("step", "a", "b1", go / 4.0)?;
    two.transition("step", "a", "b2", go / 4.0)?;
    two.transition("step", "b1", "a", go)?;
    two.transition("step", "b2", "b1", go / 2.0)?;
    two.transition("step", "b2", "b2", go / 2.0)?;
    Ok((one.build()?, two.build()?))
}

#[derive(Debug, Clone)]
pub struct LearnabilityReport {
    pub probe: DVector<f64>,
    pub value_risk: [f64; 2],
    pub bellman_risk: [f64; 2],
    pub value_error: [f64; 2],
    pub bellman_error: [f64; 2],
    pub value_error_minimizer: [DVector<f64>; 2],
    pub bellman_error_minimizer: [DVector<f64>; 2],
}

/// Evaluates all four objectives at `probe` on both environments of
/// [`learnability_pair`].
pub fn learnability_demo(probe: &DVector<f64>) -> Result<LearnabilityReport> {
    let (one, two) = learnability_pair()?;
    let policy = ReactivePolicy::constant(2, 0);
    let behavior = BehaviorPolicy::uniform(2, 1);
    let m1 = RiskModel::new(&one, &policy, &behavior)?;
    let m2 = RiskModel::new(&two, &policy, &behavior)?;
    Ok(LearnabilityReport {
        probe: probe.clone(),
        value_risk: [m1.value_risk(probe), m2.value_risk(probe)],
        bellman_risk: [m1.bellman_risk(probe), m2.bellman_risk(probe)],
        value_error: [m1.value_error(probe), m2.value_error(probe)],
        bellman_error: [m1.bellman_error(probe), m2.bellman_error(probe)],
        value_error_minimizer: [m1.minimize_value_error(), m2.minimize_value_error()],
        bellman_error_minimizer: [m1.minimize_bellman_error()?, m2.minimize_bellman_error()?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    #[test]
    fn corridor_minimizers() {
        for k in 2..=10 {
            let env = zoo::corridor(k, -1.0).unwrap();
            let right = ReactivePolicy::constant(2, env.option_index("right").unwrap());
            let m = RiskModel::for_policy(&env, &right, DEFAULT_EPSILON).unwrap();
            let kf = k as f64;
            let br = m.minimize_bellman_risk().unwrap();
            let ve = m.minimize_value_error();
            let be = m.minimize_bellman_error().unwrap();
            assert!((br[1] - 1.0).abs() < 1e-6, "k={k} {br}");
            assert!((ve[1] - (kf + 1.0) / 2.0).abs() < 1e-6, "k={k} {ve}");
            assert!((be[1] - kf).abs() < 1e-6, "k={k} {be}");
            assert!((be[0] - (be[1] - 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_aggregation_errors_equal_risks() {
        let env = zoo::corridor(3, -1.0).unwrap();
        let env = env
            .with_features(crate::FeatureMap::identity(4), vec![0.0, -1.0, -1.0, -1.0], (0..4).map(|i| format!("s{i}")).collect())
            .unwrap();
        let p = ReactivePolicy::constant(4, 1);
        let m = RiskModel::for_policy(&env, &p, 0.3).unwrap();
        let v = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
        assert!((m.value_error(&v) - m.value_risk(&v)).abs() < 1e-12);
        assert!(m.value_error(m.state_values()) < 1e-20);
        assert!(m.bellman_error(m.state_values()) < 1e-20);
    }

    #[test]
    fn constant_feature_average() {
        let trace = vec![
            ObservedStep {
                feature: 0,
                option: 0,
                next_feature: None,
                reward: 0.0,
            };
            100
        ];
        let e = feature_average(&trace, |_| 3.5).unwrap();
        assert_eq!(e.value, 3.5);
        assert_eq!(e.std_error, 0.0);
        assert!(feature_average(&[], |_| 1.0).is_err());
    }

    #[test]
    fn learnability_pair_agrees_on_risks() {
        let r = learnability_demo(&DVector::from_vec(vec![0.3, 1.2])).unwrap();
        assert!((r.value_risk[0] - r.value_risk[1]).abs() < 1e-9);
        assert!((r.bellman_risk[0] - r.bellman_risk[1]).abs() < 1e-9);
        assert!((r.bellman_error[0] - r.bellman_error[1]).abs() > 1e-3);
        assert!((&r.value_error_minimizer[0] - &r.value_error_minimizer[1]).amax() < 1e-9);
    }
}
