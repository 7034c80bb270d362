//! Committed Q-learning, its non-committed baseline, and the exact fixed
//! point the committed iterates converge to.

use nalgebra::DMatrix;
use rand::Rng;

use crate::chain::{feature_kernel, stationary_of};
use crate::dp::{all_returns, TIE_TOL};
use crate::env::{check_behavior, BehaviorPolicy, Environment, Next, ReactivePolicy, Sampler};
use crate::error::{Error, Result};

/// Episodes longer than this are reported as suspicious.
pub const EPISODE_WATCHDOG: u64 = 1_000_000;

/// Action values over features and options. The terminal feature is
/// implicit and always 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub q: DMatrix<f64>,
}

impl QTable {
    pub fn zeros(n_features: usize, n_options: usize) -> Self {
        Self {
            q: DMatrix::zeros(n_features, n_options),
        }
    }

    pub fn n_features(&self) -> usize {
        self.q.nrows()
    }

    pub fn n_options(&self) -> usize {
        self.q.ncols()
    }

    pub fn get(&self, z: usize, option: usize) -> f64 {
        self.q[(z, option)]
    }

    /// `max_omega Q(z, omega)`, 0 for `None` (the terminal feature).
    pub fn max_at(&self, z: Option<usize>) -> f64 {
        z.map_or(0.0, |z| self.q.row(z).max())
    }

    /// Option with the largest value at `z`, lowest index among ties within
    /// [`TIE_TOL`].
    pub fn argmax(&self, z: usize) -> usize {
        let best = self.q.row(z).max();
        (0..self.n_options())
            .find(|&o| self.q[(z, o)] >= best - TIE_TOL)
            .expect("nonempty row")
    }

    pub fn distance(&self, other: &QTable) -> f64 {
        (&self.q - &other.q).amax()
    }
}

/// Step sizes `tau1 / (t + tau2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub tau1: f64,
    pub tau2: f64,
}

impl StepSchedule {
    pub fn new(tau1: f64, tau2: f64) -> Result<Self> {
        if !(tau1 > 0.0 && tau2 > 0.0 && tau1.is_finite() && tau2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "schedule constants must be positive, got {tau1}, {tau2}"
            )));
        }
        Ok(Self { tau1, tau2 })
    }

    /// The schedule taking value `at0` at `t = 0` and `at1000` at `t = 1000`.
    pub fn from_anchors(at0: f64, at1000: f64) -> Result<Self> {
        if !(at0 > at1000 && at1000 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "anchors must satisfy {at0} > {at1000} > 0"
            )));
        }
        let tau2 = 1000.0 * at1000 / (at0 - at1000);
        Self::new(at0 * tau2, tau2)
    }

    pub fn at(&self, t: u64) -> f64 {
        self.tau1 / (t as f64 + self.tau2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorMode {
    Fixed(BehaviorPolicy),
    /// `epsilon_t`-greedy with respect to the current table.
    EpsilonGreedy(StepSchedule),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub total_steps: u64,
    pub committed: bool,
    pub behavior: BehaviorMode,
    pub alpha: StepSchedule,
    /// Steps after which the greedy policy is logged; the final step is
    /// always logged.
    pub checkpoints: Vec<u64>,
    /// Keep a copy of the table at every checkpoint.
    pub snapshots: bool,
}

impl RunConfig {
    /// The schedules of the corridor experiment: `epsilon` and `alpha` both
    /// go from 0.1 at `t = 0` to 0.01 at `t = 1000`.
    pub fn corridor_experiment(total_steps: u64, committed: bool, every: u64) -> Self {
        let s = StepSchedule::from_anchors(0.1, 0.01).expect("valid anchors");
        Self {
            total_steps,
            committed,
            behavior: BehaviorMode::EpsilonGreedy(s),
            alpha: s,
            checkpoints: every_n(every, total_steps),
            snapshots: false,
        }
    }
}

/// `n, 2n, ...` up to `total`; empty for `n = 0`.
pub fn every_n(n: u64, total: u64) -> Vec<u64> {
    if n == 0 {
        return Vec::new();
    }
    (1..=total / n).map(|i| i * n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t: u64,
    pub policy: ReactivePolicy,
    pub q: Option<QTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub checkpoints: Vec<Checkpoint>,
    pub episodes: u64,
    /// Episodes that exceeded [`EPISODE_WATCHDOG`] steps.
    pub long_episodes: u64,
}

/// Options used at each step, for tests of the commitment property.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visit {
    pub x: usize,
    pub feature: usize,
    pub option: usize,
    pub next: Next,
}

/// Policy that is `epsilon`-greedy with respect to `q`.
pub fn epsilon_greedy(q: &QTable, epsilon: f64) -> Result<BehaviorPolicy> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside (0, 1]")));
    }
    let no = q.n_options();
    let rows = (0..q.n_features())
        .map(|z| {
            let best = q.argmax(z);
            (0..no)
                .map(|o| epsilon / no as f64 + if o == best { 1.0 - epsilon } else { 0.0 })
                .collect()
        })
        .collect();
    BehaviorPolicy::new(rows)
}

pub fn greedy(q: &QTable) -> ReactivePolicy {
    ReactivePolicy::new((0..q.n_features()).map(|z| q.argmax(z)).collect())
}

/// False when some feature has two options within [`TIE_TOL`] of its maximum.
pub fn is_greedy_unique(q: &QTable) -> bool {
    (0..q.n_features()).all(|z| {
        let best = q.q.row(z).max();
        q.q.row(z).iter().filter(|&&v| v >= best - TIE_TOL).count() == 1
    })
}

fn sample_option<R: Rng + ?Sized>(
    mode: &BehaviorMode,
    q: &QTable,
    z: usize,
    t: u64,
    rng: &mut R,
) -> usize {
    let no = q.n_options();
    match mode {
        BehaviorMode::Fixed(b) => {
            let u = rng.random::<f64>();
            let mut acc = 0.0;
            for (o, p) in b.row(z).iter().enumerate() {
                acc += p;
                if u < acc {
                    return o;
                }
            }
            no - 1
        }
        BehaviorMode::EpsilonGreedy(s) => {
            let eps = s.at(t).min(1.0);
            if rng.random::<f64>() < eps {
                rng.random_range(0..no)
            } else {
                q.argmax(z)
            }
        }
    }
}

fn validate_config(env: &Environment, config: &RunConfig) -> Result<()> {
    if let BehaviorMode::Fixed(b) = &config.behavior {
        check_behavior(env, b)?;
    }
    if config.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("checkpoints must be strictly increasing".into()));
    }
    Ok(())
}

/// Runs the learning loop; `visit` sees every step before its update.
pub fn q_learning_traced<R: Rng + ?Sized>(
    env: &Environment,
    config: &RunConfig,
    rng: &mut R,
    mut visit: impl FnMut(u64, &Visit),
) -> Result<(QTable, RunLog)> {
    validate_config(env, config)?;
    let sampler = Sampler::new(env);
    let mut q = QTable::zeros(env.n_features(), env.n_options());
    let mut log = RunLog {
        checkpoints: Vec::with_capacity(config.checkpoints.len() + 1),
        episodes: 1,
        long_episodes: 0,
    };
    let mut next_cp = config.checkpoints.iter().copied().peekable();
    let record = |t: u64, q: &QTable, log: &mut RunLog| {
        log.checkpoints.push(Checkpoint {
            t,
            policy: greedy(q),
            q: config.snapshots.then(|| q.clone()),
        });
    };

    let mut x = sampler.initial_state(rng);
    let mut z = sampler.feature_of(x);
    let mut option = sample_option(&config.behavior, &q, z, 0, rng);
    let mut episode_len = 0u64;
    for t in 0..config.total_steps {
        while next_cp.next_if(|&c| c <= t).is_some() {
            record(t, &q, &mut log);
        }
        let step = sampler.step(x, option, rng);
        visit(t, &Visit { x, feature: z, option, next: step.next });
        let delta = step.reward + q.max_at(step.feature) - q.q[(z, option)];
        q.q[(z, option)] += config.alpha.at(t) * delta;

        episode_len += 1;
        if episode_len == EPISODE_WATCHDOG {
            log.long_episodes += 1;
            log::warn!("episode exceeded {EPISODE_WATCHDOG} steps at t = {t}");
        }
        match step.next {
            Next::Terminal(_) => {
                x = sampler.initial_state(rng);
                z = sampler.feature_of(x);
                option = sample_option(&config.behavior, &q, z, t + 1, rng);
                log.episodes += 1;
                episode_len = 0;
            }
            Next::State(y) => {
                let zy = sampler.feature_of(y);
                x = y;
                if zy != z || !config.committed {
                    z = zy;
                    option = sample_option(&config.behavior, &q, z, t + 1, rng);
                }
            }
        }
    }
    for _ in next_cp {
        record(config.total_steps, &q, &mut log);
    }
    if log.checkpoints.last().map(|c| c.t) != Some(config.total_steps) {
        record(config.total_steps, &q, &mut log);
    }
    Ok((q, log))
}

/// Committed Q-learning: the option is resampled only when the feature
/// changes or an episode ends. `config.committed` is ignored.
pub fn committed_q_learning<R: Rng + ?Sized>(
    env: &Environment,
    config: &RunConfig,
    rng: &mut R,
) -> Result<(QTable, RunLog)> {
    let config = RunConfig {
        committed: true,
        ..config.clone()
    };
    q_learning_traced(env, &config, rng, |_, _| {})
}

/// Q-learning over options that resamples its option at every step.
pub fn vanilla_q_learning<R: Rng + ?Sized>(
    env: &Environment,
    config: &RunConfig,
    rng: &mut R,
) -> Result<(QTable, RunLog)> {
    let config = RunConfig {
        committed: false,
        ..config.clone()
    };
    q_learning_traced(env, &config, rng, |_, _| {})
}

/// Operator of the committed fixed-point equation,
/// `(F Q)(z, omega) = E_mu[r(z') + max Q(z', .) | z, omega]`.
#[derive(Debug, Clone)]
pub struct FixedPointOperator {
    /// Per option, `|Z| x |Z|` conditional feature transitions.
    transitions: Vec<DMatrix<f64>>,
    /// `|Z| x |Omega|` expected immediate reward including terminal rewards.
    reward: DMatrix<f64>,
}

impl FixedPointOperator {
    pub fn new(env: &Environment, behavior: &BehaviorPolicy) -> Result<Self> {
        let dist = stationary_of(env, behavior)?;
        let fk = feature_kernel(env, &dist);
        let nz = env.n_features();
        let no = env.n_options();
        let transitions: Vec<DMatrix<f64>> = (0..no).map(|o| fk.transitions(o)).collect();
        let terminal_rewards: Vec<f64> = env.terminals().iter().map(|t| t.reward).collect();
        let reward = DMatrix::from_fn(nz, no, |z, o| {
            let to_features: f64 = (0..nz).map(|zp| transitions[o][(zp, z)] * env.reward(zp)).sum();
            let term = fk.terminations(o);
            let to_exits: f64 = (0..term.nrows()).map(|t| term[(t, z)] * terminal_rewards[t]).sum();
            to_features + to_exits
        });
        Ok(Self { transitions, reward })
    }

    pub fn apply(&self, q: &QTable) -> QTable {
        let nz = q.n_features();
        let maxes: Vec<f64> = (0..nz).map(|z| q.max_at(Some(z))).collect();
        let mut out = self.reward.clone();
        for (o, t) in self.transitions.iter().enumerate() {
            for z in 0..nz {
                out[(z, o)] += (0..nz).map(|zp| t[(zp, z)] * maxes[zp]).sum::<f64>();
            }
        }
        QTable { q: out }
    }
}

/// Solves the committed fixed-point equation by value iteration.
pub fn solve_fixed_point(env: &Environment, behavior: &BehaviorPolicy) -> Result<QTable> {
    let f = FixedPointOperator::new(env, behavior)?;
    let mut q = QTable::zeros(env.n_features(), env.n_options());
    let mut residual = f64::INFINITY;
    for _ in 0..crate::dp::MAX_SWEEPS {
        let next = f.apply(&q);
        residual = next.distance(&q);
        q = next;
        if residual <= 1e-13 {
            return Ok(q);
        }
    }
    Err(Error::NonConvergence {
        iterations: crate::dp::MAX_SWEEPS,
        residual,
    })
}

/// Decides optimality of reactive policies from precomputed returns.
#[derive(Debug, Clone)]
pub struct OptimalityOracle {
    returns: Vec<f64>,
    optimum: f64,
    n_options: usize,
}

impl OptimalityOracle {
    pub fn new(env: &Environment, cap: u64) -> Result<Self> {
        let returns = all_returns(env, cap)?;
        let optimum = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            returns,
            optimum,
            n_options: env.n_options(),
        })
    }

    pub fn optimum(&self) -> f64 {
        self.optimum
    }

    pub fn return_of(&self, policy: &ReactivePolicy) -> f64 {
        self.returns[policy.index(self.n_options) as usize]
    }

    pub fn is_optimal(&self, policy: &ReactivePolicy) -> bool {
        self.return_of(policy) >= self.optimum - TIE_TOL
    }
}

/// Per checkpoint, `(t, greedy policy is optimal)`.
pub fn optimality_trace(log: &RunLog, oracle: &OptimalityOracle) -> Vec<(u64, bool)> {
    log.checkpoints
        .iter()
        .map(|c| (c.t, oracle.is_optimal(&c.policy)))
        .collect()
}
