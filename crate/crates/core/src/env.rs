//! Finite episodic environments with deterministic observations.
//!
//! Kernels are dense `|X| x |X|` matrices indexed `[next, current]`, one per
//! primitive action. Columns are substochastic; the missing mass in a column
//! is the probability of terminating. The terminal state is never stored as a
//! row or column. Terminating mass can optionally be split over named exits
//! that carry a reward (the "square" terminal states drawn in corridor-style
//! examples); whatever is not assigned to a named exit goes to the plain
//! terminal, whose reward is zero.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance for stochasticity checks on kernels and distributions.
pub const PROB_TOL: f64 = 1e-9;

/// Default cap on `|Omega|^|Z|` for anything that enumerates reactive policies.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// A fixed distribution over primitive actions.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionDist {
    name: String,
    weights: Vec<f64>,
}

impl OptionDist {
    pub fn new(name: impl Into<String>, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("option over zero actions".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidArgument(format!("negative option weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "option weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            name: name.into(),
            weights,
        })
    }

    /// The option that always plays `action`.
    pub fn deterministic(name: impl Into<String>, n_actions: usize, action: usize) -> Self {
        let mut weights = vec![0.0; n_actions];
        weights[action] = 1.0;
        Self {
            name: name.into(),
            weights,
        }
    }

    /// Convex combination `alpha * a + (1 - alpha) * b`.
    pub fn mix(a: &OptionDist, b: &OptionDist, alpha: f64) -> Result<Self> {
        if a.weights.len() != b.weights.len() {
            return Err(Error::Dimension("mixing options of different arity".into()));
        }
        let weights = a
            .weights
            .iter()
            .zip(&b.weights)
            .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
            .collect();
        Self::new(format!("{}+{}", a.name, b.name), weights)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_actions(&self) -> usize {
        self.weights.len()
    }
}

/// Hard state aggregation: every nonterminal state belongs to exactly one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl FeatureMap {
    pub fn new(assignment: Vec<usize>, n_features: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); n_features];
        for (x, &z) in assignment.iter().enumerate() {
            if z >= n_features {
                return Err(Error::Dimension(format!(
                    "state {x} assigned to feature {z}, only {n_features} features"
                )));
            }
            members[z].push(x);
        }
        if let Some(z) = members.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("feature {z} has no states")));
        }
        Ok(Self {
            assignment,
            members,
        })
    }

    /// Every state is its own feature.
    pub fn identity(n_states: usize) -> Self {
        Self::new((0..n_states).collect(), n_states).expect("identity map is valid")
    }

    pub fn n_states(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_features(&self) -> usize {
        self.members.len()
    }

    pub fn feature_of(&self, x: usize) -> usize {
        self.assignment[x]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn states_of(&self, z: usize) -> &[usize] {
        &self.members[z]
    }

    /// One-hot `|Z| x |X|` matrix with `Phi[z, x] = [phi(x) = z]`.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_features(), self.n_states(), |z, x| {
            if self.assignment[x] == z {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Diagonal projection onto the coordinates of feature `z`.
    pub fn projection(&self, z: usize) -> DMatrix<f64> {
        let n = self.n_states();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j && self.assignment[i] == z {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Projection onto the coordinates outside feature `z`.
    pub fn complement(&self, z: usize) -> DMatrix<f64> {
        DMatrix::identity(self.n_states(), self.n_states()) - self.projection(z)
    }
}

/// A terminal outcome. Index 0 of [`Environment::terminals`] is always the
/// plain terminal state with reward zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Terminal {
    pub name: String,
    pub reward: f64,
}

/// Where a transition lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Next {
    State(usize),
    Terminal(usize),
}

impl Next {
    pub fn is_terminal(self) -> bool {
        matches!(self, Next::Terminal(_))
    }
}

/// Deterministic reactive policy: one option index per feature.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReactivePolicy {
    choice: Vec<usize>,
}

impl ReactivePolicy {
    pub fn new(choice: Vec<usize>) -> Self {
        Self { choice }
    }

    pub fn constant(n_features: usize, option: usize) -> Self {
        Self {
            choice: vec![option; n_features],
        }
    }

    /// Decodes a mixed-radix policy index; feature 0 is the least significant digit.
    pub fn from_index(mut index: u64, n_features: usize, n_options: usize) -> Self {
        let base = n_options as u64;
        let choice = (0..n_features)
            .map(|_| {
                let d = (index % base) as usize;
                index /= base;
                d
            })
            .collect();
        Self { choice }
    }

    pub fn index(&self, n_options: usize) -> u64 {
        self.choice
            .iter()
            .rev()
            .fold(0u64, |acc, &d| acc * n_options as u64 + d as u64)
    }

    pub fn option_at(&self, z: usize) -> usize {
        self.choice[z]
    }

    pub fn choices(&self) -> &[usize] {
        &self.choice
    }

    pub fn n_features(&self) -> usize {
        self.choice.len()
    }
}

impl std::fmt::Display for ReactivePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.choice.iter().map(|c| c.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Stochastic behavior policy over option indices with full support.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPolicy {
    dist: Vec<Vec<f64>>,
}

impl BehaviorPolicy {
    pub fn new(dist: Vec<Vec<f64>>) -> Result<Self> {
        for (z, row) in dist.iter().enumerate() {
            if let Some(o) = row.iter().position(|p| !(*p > 0.0)) {
                return Err(Error::NoFullSupport {
                    feature: z,
                    option: o,
                });
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "behavior row {z} sums to {total}"
                )));
            }
        }
        Ok(Self { dist })
    }

    pub fn uniform(n_features: usize, n_options: usize) -> Self {
        Self {
            dist: vec![vec![1.0 / n_options as f64; n_options]; n_features],
        }
    }

    /// `(1 - eps)` on the option chosen by `policy`, `eps` spread uniformly.
    pub fn epsilon_mix(policy: &ReactivePolicy, eps: f64, n_options: usize) -> Result<Self> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon {eps} outside (0, 1]")));
        }
        let dist = policy
            .choices()
            .iter()
            .map(|&c| {
                (0..n_options)
                    .map(|o| {
                        let base = eps / n_options as f64;
                        if o == c {
                            1.0 - eps + base
                        } else {
                            base
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(dist)
    }

    pub fn prob(&self, z: usize, option: usize) -> f64 {
        self.dist[z][option]
    }

    pub fn row(&self, z: usize) -> &[f64] {
        &self.dist[z]
    }

    pub fn n_features(&self) -> usize {
        self.dist.len()
    }

    pub fn n_options(&self) -> usize {
        self.dist.first().map_or(0, Vec::len)
    }
}

/// A problem found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NegativeEntry {
        action: usize,
        from: usize,
        to: Next,
        value: f64,
    },
    ColumnMass {
        action: usize,
        state: usize,
        mass: f64,
    },
    InitialDistribution {
        sum: f64,
        min: f64,
    },
    RewardForUnknownFeature {
        feature: usize,
    },
    OptionArity {
        option: usize,
        arity: usize,
    },
    NoOptions,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NegativeEntry {
                action,
                from,
                to,
                value,
            } => write!(f, "negative entry {value} for action {action}, {from} -> {to:?}"),
            Violation::ColumnMass {
                action,
                state,
                mass,
            } => write!(f, "column mass {mass} > 1 for action {action} at state {state}"),
            Violation::InitialDistribution { sum, min } => {
                write!(f, "initial distribution sums to {sum} (min entry {min})")
            }
            Violation::RewardForUnknownFeature { feature } => {
                write!(f, "reward defined for unknown feature {feature}")
            }
            Violation::OptionArity { option, arity } => {
                write!(f, "option {option} is over {arity} actions")
            }
            Violation::NoOptions => write!(f, "option set is empty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    state_names: Vec<String>,
    action_names: Vec<String>,
    feature_names: Vec<String>,
    kernels: Vec<DMatrix<f64>>,
    terminals: Vec<Terminal>,
    /// Per action, `(n_terminals - 1) x |X|` probabilities of the named exits.
    exit_kernels: Vec<DMatrix<f64>>,
    p0: DVector<f64>,
    rewards: Vec<f64>,
    features: FeatureMap,
    options: Vec<OptionDist>,
}

impl Environment {
    /// Assembles an environment from raw parts. Only shapes are checked here;
    /// use [`validate`] for stochasticity. `options = None` gives one
    /// deterministic option per action.
    pub fn from_parts(
        kernels: Vec<DMatrix<f64>>,
        p0: DVector<f64>,
        rewards: Vec<f64>,
        features: FeatureMap,
        options: Option<Vec<OptionDist>>,
    ) -> Result<Self> {
        let n = p0.len();
        let n_actions = kernels.len();
        let exit_kernels = vec![DMatrix::zeros(0, n); n_actions];
        Self::with_exits(kernels, Vec::new(), exit_kernels, p0, rewards, features, options)
    }

    /// Like [`Environment::from_parts`] with named rewarded exits.
    pub fn with_exits(
        kernels: Vec<DMatrix<f64>>,
        exits: Vec<Terminal>,
        exit_kernels: Vec<DMatrix<f64>>,
        p0: DVector<f64>,
        rewards: Vec<f64>,
        features: FeatureMap,
        options: Option<Vec<OptionDist>>,
    ) -> Result<Self> {
        let n = p0.len();
        if kernels.is_empty() {
            return Err(Error::Dimension("no actions".into()));
        }
        if n == 0 {
            return Err(Error::Dimension("no states".into()));
        }
        for (u, k) in kernels.iter().enumerate() {
            if k.nrows() != n || k.ncols() != n {
                return Err(Error::Dimension(format!(
                    "kernel {u} is {}x{}, expected {n}x{n}",
                    k.nrows(),
                    k.ncols()
                )));
            }
        }
        if exit_kernels.len() != kernels.len() {
            return Err(Error::Dimension("one exit kernel per action required".into()));
        }
        for (u, e) in exit_kernels.iter().enumerate() {
            if e.nrows() != exits.len() || e.ncols() != n {
                return Err(Error::Dimension(format!("exit kernel {u} has wrong shape")));
            }
        }
        if features.n_states() != n {
            return Err(Error::Dimension(format!(
                "feature map covers {} states, expected {n}",
                features.n_states()
            )));
        }
        if rewards.len() < features.n_features() {
            return Err(Error::Dimension(format!(
                "{} rewards for {} features",
                rewards.len(),
                features.n_features()
            )));
        }
        let n_actions = kernels.len();
        let options = options.unwrap_or_else(|| {
            (0..n_actions)
                .map(|u| OptionDist::deterministic(format!("a{u}"), n_actions, u))
                .collect()
        });
        let mut terminals = vec![Terminal {
            name: "terminal".into(),
            reward: 0.0,
        }];
        terminals.extend(exits);
        Ok(Self {
            state_names: (0..n).map(|x| x.to_string()).collect(),
            action_names: (0..n_actions).map(|u| format!("a{u}")).collect(),
            feature_names: (0..features.n_features()).map(|z| format!("z{z}")).collect(),
            kernels,
            terminals,
            exit_kernels,
            p0,
            rewards,
            features,
            options,
        })
    }

    pub fn with_names(
        mut self,
        states: Vec<String>,
        actions: Vec<String>,
        features: Vec<String>,
    ) -> Result<Self> {
        if states.len() != self.n_states()
            || actions.len() != self.n_actions()
            || features.len() != self.n_features()
        {
            return Err(Error::Dimension("name lists do not match shapes".into()));
        }
        self.state_names = states;
        self.action_names = actions;
        self.feature_names = features;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.p0.len()
    }

    pub fn n_actions(&self) -> usize {
        self.kernels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.n_features()
    }

    pub fn n_options(&self) -> usize {
        self.options.len()
    }

    pub fn n_terminals(&self) -> usize {
        self.terminals.len()
    }

    pub fn kernel(&self, u: usize) -> &DMatrix<f64> {
        &self.kernels[u]
    }

    pub fn kernels(&self) -> &[DMatrix<f64>] {
        &self.kernels
    }

    pub fn exit_kernel(&self, u: usize) -> &DMatrix<f64> {
        &self.exit_kernels[u]
    }

    pub fn terminals(&self) -> &[Terminal] {
        &self.terminals
    }

    pub fn p0(&self) -> &DVector<f64> {
        &self.p0
    }

    /// Feature rewards; entries past `n_features` are reported by [`validate`].
    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn reward(&self, z: usize) -> f64 {
        self.rewards[z]
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn options(&self) -> &[OptionDist] {
        &self.options
    }

    pub fn option(&self, o: usize) -> &OptionDist {
        &self.options[o]
    }

    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }

    pub fn action_names(&self) -> &[String] {
        &self.action_names
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.state_names.iter().position(|s| s == name)
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|s| s == name)
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.action_names.iter().position(|s| s == name)
    }

    pub fn option_index(&self, name: &str) -> Option<usize> {
        self.options.iter().position(|o| o.name() == name)
    }

    pub fn feature_of(&self, x: usize) -> usize {
        self.features.feature_of(x)
    }

    /// Reward for landing on `next`.
    pub fn reward_of(&self, next: Next) -> f64 {
        match next {
            Next::State(x) => self.rewards[self.feature_of(x)],
            Next::Terminal(t) => self.terminals[t].reward,
        }
    }

    /// `(n_terminals) x |X|` termination probabilities under action `u`; row 0
    /// is the plain terminal and absorbs whatever the named exits leave.
    pub fn termination_matrix(&self, u: usize) -> DMatrix<f64> {
        let n = self.n_states();
        let mut out = DMatrix::zeros(self.n_terminals(), n);
        let stay = self.kernels[u].row_sum();
        for x in 0..n {
            let named: f64 = self.exit_kernels[u].column(x).sum();
            out[(0, x)] = (1.0 - stay[x] - named).max(0.0);
            for e in 0..self.exit_kernels[u].nrows() {
                out[(e + 1, x)] = self.exit_kernels[u][(e, x)];
            }
        }
        out
    }

    /// Termination matrix of an option.
    pub fn option_termination(&self, omega: &OptionDist) -> Result<DMatrix<f64>> {
        self.check_option(omega)?;
        let mut out = DMatrix::zeros(self.n_terminals(), self.n_states());
        for (u, &w) in omega.weights().iter().enumerate() {
            if w != 0.0 {
                out += self.termination_matrix(u) * w;
            }
        }
        Ok(out)
    }

    /// Expected terminal reward collected from each state under `omega`.
    pub fn exit_reward_vector(&self, omega: &OptionDist) -> Result<DVector<f64>> {
        let term = self.option_termination(omega)?;
        let r = DVector::from_iterator(self.n_terminals(), self.terminals.iter().map(|t| t.reward));
        Ok(term.transpose() * r)
    }

    /// Feature rewards lifted to states, `Phi^T r`.
    pub fn state_rewards(&self) -> DVector<f64> {
        DVector::from_fn(self.n_states(), |x, _| self.rewards[self.feature_of(x)])
    }

    fn check_option(&self, omega: &OptionDist) -> Result<()> {
        if omega.n_actions() != self.n_actions() {
            return Err(Error::Dimension(format!(
                "option over {} actions, environment has {}",
                omega.n_actions(),
                self.n_actions()
            )));
        }
        Ok(())
    }

    /// Same dynamics with a different aggregation and reward table.
    pub fn with_features(
        &self,
        features: FeatureMap,
        rewards: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let mut env = Self::with_exits(
            self.kernels.clone(),
            self.terminals[1..].to_vec(),
            self.exit_kernels.clone(),
            self.p0.clone(),
            rewards,
            features,
            Some(self.options.clone()),
        )?;
        env.state_names = self.state_names.clone();
        env.action_names = self.action_names.clone();
        if feature_names.len() != env.n_features() {
            return Err(Error::Dimension("feature names".into()));
        }
        env.feature_names = feature_names;
        Ok(env)
    }

    /// Same structure with replaced initial distribution and kernels. Used to
    /// build rewirings.
    pub fn with_dynamics(&self, p0: DVector<f64>, kernels: Vec<DMatrix<f64>>) -> Result<Self> {
        if p0.len() != self.n_states() || kernels.len() != self.n_actions() {
            return Err(Error::Dimension("replacement dynamics have wrong shape".into()));
        }
        for k in &kernels {
            if k.shape() != (self.n_states(), self.n_states()) {
                return Err(Error::Dimension("replacement kernel has wrong shape".into()));
            }
        }
        let mut env = self.clone();
        env.p0 = p0;
        env.kernels = kernels;
        Ok(env)
    }

    pub fn with_options(&self, options: Vec<OptionDist>) -> Result<Self> {
        for o in &options {
            self.check_option(o)?;
        }
        let mut env = self.clone();
        env.options = options;
        Ok(env)
    }
}

/// Lists every stochasticity problem; empty iff the environment is valid.
pub fn validate(env: &Environment) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = env.n_states();
    for u in 0..env.n_actions() {
        let k = env.kernel(u);
        let e = env.exit_kernel(u);
        for x in 0..n {
            let mut mass = 0.0;
            for y in 0..n {
                let p = k[(y, x)];
                if p < 0.0 {
                    out.push(Violation::NegativeEntry {
                        action: u,
                        from: x,
                        to: Next::State(y),
                        value: p,
                    });
                }
                mass += p;
            }
            for t in 0..e.nrows() {
                let p = e[(t, x)];
                if p < 0.0 {
                    out.push(Violation::NegativeEntry {
                        action: u,
                        from: x,
                        to: Next::Terminal(t + 1),
                        value: p,
                    });
                }
                mass += p;
            }
            if mass > 1.0 + PROB_TOL {
                out.push(Violation::ColumnMass {
                    action: u,
                    state: x,
                    mass,
                });
            }
        }
    }
    let sum = env.p0().sum();
    let min = env.p0().min();
    if (sum - 1.0).abs() > PROB_TOL || min < 0.0 {
        out.push(Violation::InitialDistribution { sum, min });
    }
    for z in env.n_features()..env.rewards().len() {
        out.push(Violation::RewardForUnknownFeature { feature: z });
    }
    if env.options().is_empty() {
        out.push(Violation::NoOptions);
    }
    for (o, opt) in env.options().iter().enumerate() {
        if opt.n_actions() != env.n_actions() {
            out.push(Violation::OptionArity {
                option: o,
                arity: opt.n_actions(),
            });
        }
    }
    out
}

/// `T_omega = sum_u omega(u) T_u`.
pub fn option_kernel(env: &Environment, omega: &OptionDist) -> Result<DMatrix<f64>> {
    env.check_option(omega)?;
    let n = env.n_states();
    let mut out = DMatrix::zeros(n, n);
    for (u, &w) in omega.weights().iter().enumerate() {
        if w != 0.0 {
            out += env.kernel(u) * w;
        }
    }
    Ok(out)
}

/// Probability of terminating from each state under `omega`, clamped to `[0, 1]`.
pub fn termination_vector(env: &Environment, omega: &OptionDist) -> Result<DVector<f64>> {
    let k = option_kernel(env, omega)?;
    let stay = k.row_sum();
    Ok(stay.map(|m| (1.0 - m).clamp(0.0, 1.0)).transpose())
}

/// Kernel of a reactive policy: column `x` is taken from the option chosen at `phi(x)`.
pub fn policy_kernel(env: &Environment, policy: &ReactivePolicy) -> Result<DMatrix<f64>> {
    check_policy(env, policy)?;
    let per_option: Vec<DMatrix<f64>> = env
        .options()
        .iter()
        .map(|o| option_kernel(env, o))
        .collect::<Result<_>>()?;
    let n = env.n_states();
    Ok(DMatrix::from_fn(n, n, |y, x| {
        per_option[policy.option_at(env.feature_of(x))][(y, x)]
    }))
}

/// Expected terminal reward from each state under a reactive policy.
pub fn policy_exit_rewards(env: &Environment, policy: &ReactivePolicy) -> Result<DVector<f64>> {
    check_policy(env, policy)?;
    let per_option: Vec<DVector<f64>> = env
        .options()
        .iter()
        .map(|o| env.exit_reward_vector(o))
        .collect::<Result<_>>()?;
    Ok(DVector::from_fn(env.n_states(), |x, _| {
        per_option[policy.option_at(env.feature_of(x))][x]
    }))
}

pub(crate) fn check_policy(env: &Environment, policy: &ReactivePolicy) -> Result<()> {
    if policy.n_features() != env.n_features() {
        return Err(Error::Dimension(format!(
            "policy covers {} features, environment has {}",
            policy.n_features(),
            env.n_features()
        )));
    }
    if let Some(&o) = policy.choices().iter().find(|&&o| o >= env.n_options()) {
        return Err(Error::InvalidArgument(format!("option index {o} out of range")));
    }
    Ok(())
}

pub(crate) fn check_behavior(env: &Environment, behavior: &BehaviorPolicy) -> Result<()> {
    if behavior.n_features() != env.n_features() || behavior.n_options() != env.n_options() {
        return Err(Error::Dimension(format!(
            "behavior is {}x{}, environment has {} features and {} options",
            behavior.n_features(),
            behavior.n_options(),
            env.n_features(),
            env.n_options()
        )));
    }
    Ok(())
}

/// Number of reactive policies, checked against a cap.
pub fn policy_count(env: &Environment, cap: u64) -> Result<u64> {
    let needed = (env.n_options() as f64).powi(env.n_features() as i32);
    if needed > cap as f64 {
        return Err(Error::EnumerationCapExceeded { needed, cap });
    }
    Ok(needed.round() as u64)
}

/// Outcome of [`is_proper`].
#[derive(Debug, Clone, PartialEq)]
pub struct Properness {
    pub proper: bool,
    /// A policy and a state from which the terminal state is unreachable.
    pub counterexample: Option<(ReactivePolicy, usize)>,
}

/// Checks that every reactive policy terminates from every state, by
/// reachability of a leaking state on the support graph of `T_pi`.
pub fn is_proper(env: &Environment, cap: u64) -> Result<Properness> {
    let start: Vec<bool> = vec![true; env.n_states()];
    is_proper_from(env, &start, cap)
}

/// As [`is_proper`], but only states flagged in `from` need to terminate.
pub fn is_proper_from(env: &Environment, from: &[bool], cap: u64) -> Result<Properness> {
    let count = policy_count(env, cap)?;
    let n = env.n_states();
    let kernels: Vec<DMatrix<f64>> = env
        .options()
        .iter()
        .map(|o| option_kernel(env, o))
        .collect::<Result<_>>()?;
    for idx in 0..count {
        let policy = ReactivePolicy::from_index(idx, env.n_features(), env.n_options());
        let column = |x: usize| &kernels[policy.option_at(env.feature_of(x))];
        // Backward search from states that leak mass to the terminal.
        let mut escapes = vec![false; n];
        let mut queue = VecDeque::new();
        for x in 0..n {
            let mass: f64 = column(x).column(x).sum();
            if 1.0 - mass > 1e-12 {
                escapes[x] = true;
                queue.push_back(x);
            }
        }
        while let Some(y) = queue.pop_front() {
            for x in 0..n {
                if !escapes[x] && column(x)[(y, x)] > 0.0 {
                    escapes[x] = true;
                    queue.push_back(x);
                }
            }
        }
        if let Some(x) = (0..n).find(|&x| from[x] && !escapes[x]) {
            return Ok(Properness {
                proper: false,
                counterexample: Some((policy, x)),
            });
        }
    }
    Ok(Properness {
        proper: true,
        counterexample: None,
    })
}

/// States reachable from the support of `p0` under some reactive policy.
pub fn reachable_states(env: &Environment) -> Vec<bool> {
    let n = env.n_states();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    for x in 0..n {
        if env.p0()[x] > 0.0 {
            seen[x] = true;
            queue.push_back(x);
        }
    }
    while let Some(x) = queue.pop_front() {
        for k in env.kernels() {
            for y in 0..n {
                if !seen[y] && k[(y, x)] > 0.0 {
                    seen[y] = true;
                    queue.push_back(y);
                }
            }
        }
    }
    seen
}

/// Result of one simulated transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub action: usize,
    pub next: Next,
    /// Feature of `next`, `None` for terminal outcomes.
    pub feature: Option<usize>,
    pub reward: f64,
}

/// Precomputed cumulative tables for fast sampling.
#[derive(Debug, Clone)]
pub struct Sampler {
    /// `[u][x]` successor list with cumulative probabilities.
    columns: Vec<Vec<Vec<(Next, f64)>>>,
    /// `[option]` cumulative distribution over actions.
    options: Vec<Vec<(usize, f64)>>,
    p0: Vec<(usize, f64)>,
    features: Vec<usize>,
    rewards: Vec<f64>,
    terminal_rewards: Vec<f64>,
}

fn cumulative<T: Copy>(items: impl IntoIterator<Item = (T, f64)>) -> Vec<(T, f64)> {
    let mut acc = 0.0;
    items
        .into_iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(t, p)| {
            acc += p;
            (t, acc)
        })
        .collect()
}

fn draw<T: Copy>(table: &[(T, f64)], u: f64) -> T {
    let total = table.last().expect("empty sampling table").1;
    let target = u * total;
    table
        .iter()
        .find(|(_, c)| target < *c)
        .unwrap_or_else(|| table.last().unwrap())
        .0
}

impl Sampler {
    pub fn new(env: &Environment) -> Self {
        let n = env.n_states();
        let columns = (0..env.n_actions())
            .map(|u| {
                let term = env.termination_matrix(u);
                (0..n)
                    .map(|x| {
                        let states = (0..n).map(|y| (Next::State(y), env.kernel(u)[(y, x)]));
                        let terms = (0..env.n_terminals()).map(|t| (Next::Terminal(t), term[(t, x)]));
                        cumulative(states.chain(terms))
                    })
                    .collect()
            })
            .collect();
        let options = env
            .options()
            .iter()
            .map(|o| cumulative(o.weights().iter().copied().enumerate()))
            .collect();
        Self {
            columns,
            options,
            p0: cumulative(env.p0().iter().copied().enumerate()),
            features: env.features().assignment().to_vec(),
            rewards: env.rewards().to_vec(),
            terminal_rewards: env.terminals().iter().map(|t| t.reward).collect(),
        }
    }

    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        draw(&self.p0, rng.random::<f64>())
    }

    pub fn feature_of(&self, x: usize) -> usize {
        self.features[x]
    }

    /// One transition from `x` under option index `option`.
    pub fn step<R: Rng + ?Sized>(&self, x: usize, option: usize, rng: &mut R) -> Step {
        let action = draw(&self.options[option], rng.random::<f64>());
        self.step_action(x, action, rng)
    }

    pub fn step_action<R: Rng + ?Sized>(&self, x: usize, action: usize, rng: &mut R) -> Step {
        let next = draw(&self.columns[action][x], rng.random::<f64>());
        let (feature, reward) = match next {
            Next::State(y) => {
                let z = self.features[y];
                (Some(z), self.rewards[z])
            }
            Next::Terminal(t) => (None, self.terminal_rewards[t]),
        };
        Step {
            action,
            next,
            feature,
            reward,
        }
    }
}

/// Samples `u ~ omega`, then `x' ~ T'_u[:, x]`.
pub fn simulate_step<R: Rng + ?Sized>(
    env: &Environment,
    x: Next,
    omega: &OptionDist,
    rng: &mut R,
) -> Result<Step> {
    let Next::State(x) = x else {
        return Err(Error::TerminalState);
    };
    if x >= env.n_states() {
        return Err(Error::Dimension(format!("state {x} out of range")));
    }
    env.check_option(omega)?;
    let action = draw(
        &cumulative(omega.weights().iter().copied().enumerate()),
        rng.random::<f64>(),
    );
    let term = env.termination_matrix(action);
    let n = env.n_states();
    let states = (0..n).map(|y| (Next::State(y), env.kernel(action)[(y, x)]));
    let terms = (0..env.n_terminals()).map(|t| (Next::Terminal(t), term[(t, x)]));
    let column = cumulative(states.chain(terms));
    let next = draw(&column, rng.random::<f64>());
    let feature = match next {
        Next::State(y) => Some(env.feature_of(y)),
        Next::Terminal(_) => None,
    };
    Ok(Step {
        action,
        next,
        feature,
        reward: env.reward_of(next),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn two_state() -> Environment {
        // action 0: 0 -> 1, 1 -> terminal. action 1: stay with 0.5, else terminate.
        let k0 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let k1 = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
        Environment::from_parts(
            vec![k0, k1],
            DVector::from_vec(vec![1.0, 0.0]),
            vec![1.0, -1.0],
            FeatureMap::new(vec![0, 1], 2).unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn valid_env_has_empty_report() {
        assert!(validate(&two_state()).is_empty());
    }

    #[test]
    fn column_mass_violation_is_reported_once() {
        let env = two_state();
        let mut k0 = env.kernel(0).clone();
        k0[(0, 0)] = 0.2; // column 0 now sums to 1.2
        let bad = env.with_dynamics(env.p0().clone(), vec![k0, env.kernel(1).clone()]).unwrap();
        let report = validate(&bad);
        assert_eq!(report.len(), 1);
        assert!(matches!(report[0], Violation::ColumnMass { action: 0, state: 0, .. }));
    }

    #[test]
    fn unnormalized_p0_is_reported_once() {
        let env = two_state();
        let bad = env
            .with_dynamics(DVector::from_vec(vec![0.9, 0.0]), env.kernels().to_vec())
            .unwrap();
        let report = validate(&bad);
        assert_eq!(report.len(), 1);
        assert!(matches!(report[0], Violation::InitialDistribution { .. }));
    }

    #[test]
    fn extra_reward_is_reported() {
        let env = two_state();
        let bad = Environment::from_parts(
            env.kernels().to_vec(),
            env.p0().clone(),
            vec![1.0, -1.0, 3.0],
            env.features().clone(),
            None,
        )
        .unwrap();
        assert_eq!(
            validate(&bad),
            vec![Violation::RewardForUnknownFeature { feature: 2 }]
        );
    }

    #[test]
    fn deterministic_option_kernel_is_the_action_kernel() {
        let env = two_state();
        let k = option_kernel(&env, &OptionDist::deterministic("x", 2, 1)).unwrap();
        assert_eq!(&k, env.kernel(1));
    }

    #[test]
    fn uniform_option_kernel_is_the_average() {
        let env = two_state();
        let k = option_kernel(&env, &OptionDist::new("u", vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(k, (env.kernel(0) + env.kernel(1)) / 2.0);
    }

    #[test]
    fn option_arity_mismatch_errors() {
        let env = two_state();
        let bad = OptionDist::new("x", vec![1.0]).unwrap();
        assert!(matches!(option_kernel(&env, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn termination_of_full_and_empty_columns() {
        let env = two_state();
        let t = termination_vector(&env, &OptionDist::deterministic("x", 2, 0)).unwrap();
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 1.0);
    }

    #[test]
    fn self_loop_is_improper() {
        let env = Environment::from_parts(
            vec![DMatrix::from_element(1, 1, 1.0)],
            DVector::from_element(1, 1.0),
            vec![0.0],
            FeatureMap::identity(1),
            None,
        )
        .unwrap();
        let p = is_proper(&env, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!(!p.proper);
        assert_eq!(p.counterexample, Some((ReactivePolicy::new(vec![0]), 0)));
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let env = two_state();
        assert!(matches!(
            is_proper(&env, 3),
            Err(Error::EnumerationCapExceeded { .. })
        ));
    }

    #[test]
    fn policy_index_round_trip() {
        for idx in 0..27 {
            let p = ReactivePolicy::from_index(idx, 3, 3);
            assert_eq!(p.index(3), idx);
        }
    }

    #[test]
    fn epsilon_greedy_mix_weights() {
        let b = BehaviorPolicy::epsilon_mix(&ReactivePolicy::new(vec![1]), 0.1, 2).unwrap();
        assert!((b.prob(0, 1) - 0.95).abs() < 1e-15);
        assert!((b.prob(0, 0) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn behavior_without_full_support_is_rejected() {
        assert!(matches!(
            BehaviorPolicy::new(vec![vec![1.0, 0.0]]),
            Err(Error::NoFullSupport { feature: 0, option: 1 })
        ));
    }

    #[test]
    fn stepping_from_terminal_errors() {
        let env = two_state();
        let mut rng = stream_rng(0, 0);
        let opt = env.option(0).clone();
        assert_eq!(
            simulate_step(&env, Next::Terminal(0), &opt, &mut rng),
            Err(Error::TerminalState)
        );
    }

    #[test]
    fn deterministic_column_is_followed() {
        let env = two_state();
        let mut rng = stream_rng(1, 0);
        let opt = env.option(0).clone();
        for _ in 0..100 {
            let s = simulate_step(&env, Next::State(0), &opt, &mut rng).unwrap();
            assert_eq!(s.next, Next::State(1));
            assert_eq!(s.feature, Some(1));
            assert_eq!(s.reward, -1.0);
        }
    }
}
