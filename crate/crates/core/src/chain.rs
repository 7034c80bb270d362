//! The chain of `(x, option, x')` tuples generated by committed behavior
//! with episode restarts, and its stationary distribution.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::env::{
    check_behavior, option_kernel, termination_vector, BehaviorPolicy, Environment, Next, Sampler,
};
use crate::error::{Error, Result};
use crate::linalg::stationary_lsq;

/// One tuple `(x, option, x')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Xi {
    pub x: usize,
    pub option: usize,
    pub next: Next,
}

#[derive(Debug, Clone)]
pub struct XiChain {
    pub tuples: Vec<Xi>,
    index: HashMap<Xi, usize>,
    /// Row-stochastic transition matrix over `tuples`.
    pub kernel: DMatrix<f64>,
    pub reachable_states: Vec<bool>,
    pub reachable_features: Vec<bool>,
}

/// Successor distribution of `(x, option)` over extended states.
fn successors(kernels: &[DMatrix<f64>], terms: &[DMatrix<f64>], x: usize, option: usize) -> Vec<(Next, f64)> {
    let k = &kernels[option];
    let t = &terms[option];
    let states = (0..k.nrows()).map(|y| (Next::State(y), k[(y, x)]));
    let exits = (0..t.nrows()).map(|e| (Next::Terminal(e), t[(e, x)]));
    states.chain(exits).filter(|(_, p)| *p > 0.0).collect()
}

/// Builds the reachable tuple set by forward search from the initial tuples
/// and fills in the transition kernel: restart from `p0` after a terminal
/// outcome; keep the option while the feature does not change; otherwise
/// draw a fresh option from the behavior.
pub fn build_chain(env: &Environment, behavior: &BehaviorPolicy) -> Result<XiChain> {
    check_behavior(env, behavior)?;
    let no = env.n_options();
    let kernels: Vec<DMatrix<f64>> = env
        .options()
        .iter()
        .map(|o| option_kernel(env, o))
        .collect::<Result<_>>()?;
    let terms: Vec<DMatrix<f64>> = env
        .options()
        .iter()
        .map(|o| env.option_termination(o))
        .collect::<Result<_>>()?;
    let phi = |x: usize| env.feature_of(x);

    // Distribution of the next (x, option) pair given the current tuple.
    let restart: Vec<(usize, usize, f64)> = (0..env.n_states())
        .filter(|&x| env.p0()[x] > 0.0)
        .flat_map(|x| (0..no).map(move |o| (x, o)))
        .map(|(x, o)| (x, o, env.p0()[x] * behavior.prob(phi(x), o)))
        .collect();
    let entry = |xi: &Xi| -> Vec<(usize, usize, f64)> {
        match xi.next {
            Next::Terminal(_) => restart.clone(),
            Next::State(y) if phi(y) == phi(xi.x) => vec![(y, xi.option, 1.0)],
            Next::State(y) => (0..no).map(|o| (y, o, behavior.prob(phi(y), o))).collect(),
        }
    };

    let mut tuples = Vec::new();
    let mut index = HashMap::new();
    let mut queue = VecDeque::new();
    let mut push = |xi: Xi, tuples: &mut Vec<Xi>, queue: &mut VecDeque<usize>| -> usize {
        *index.entry(xi).or_insert_with(|| {
            tuples.push(xi);
            queue.push_back(tuples.len() - 1);
            tuples.len() - 1
        })
    };
    for &(x, o, _) in &restart {
        for (next, _) in successors(&kernels, &terms, x, o) {
            push(Xi { x, option: o, next }, &mut tuples, &mut queue);
        }
    }
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    while let Some(i) = queue.pop_front() {
        let xi = tuples[i];
        for (x, o, p) in entry(&xi) {
            for (next, q) in successors(&kernels, &terms, x, o) {
                let j = push(Xi { x, option: o, next }, &mut tuples, &mut queue);
                edges.push((i, j, p * q));
            }
        }
    }
    let n = tuples.len();
    let mut kernel = DMatrix::zeros(n, n);
    for (i, j, p) in edges {
        kernel[(i, j)] += p;
    }
    let mut reachable_states = vec![false; env.n_states()];
    let mut reachable_features = vec![false; env.n_features()];
    for xi in &tuples {
        reachable_states[xi.x] = true;
        reachable_features[phi(xi.x)] = true;
    }
    let index = tuples.iter().enumerate().map(|(i, xi)| (*xi, i)).collect();
    Ok(XiChain {
        tuples,
        index,
        kernel,
        reachable_states,
        reachable_features,
    })
}

impl XiChain {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn position(&self, xi: &Xi) -> Option<usize> {
        self.index.get(xi).copied()
    }

    /// Strong connectivity of the support graph.
    pub fn is_irreducible(&self) -> bool {
        let n = self.len();
        let reach = |forward: bool| {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    let p = if forward { self.kernel[(i, j)] } else { self.kernel[(j, i)] };
                    if p > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        n > 0 && reach(true) && reach(false)
    }
}

/// Stationary distribution over the reachable tuples.
#[derive(Debug, Clone)]
pub struct StationaryDistribution {
    pub tuples: Vec<Xi>,
    pub mu: DVector<f64>,
    n_states: usize,
    n_options: usize,
}

/// Solves `mu^T P' = mu^T`, `sum mu = 1`.
pub fn stationary(chain: &XiChain) -> Result<StationaryDistribution> {
    if chain.is_empty() {
        return Err(Error::Consistency("empty tuple chain".into()));
    }
    let mu = stationary_lsq(&chain.kernel)?;
    let residual = (chain.kernel.transpose() * &mu - &mu).amax();
    if residual > 1e-10 {
        return Err(Error::Consistency(format!("stationary residual {residual:e}")));
    }
    if let Some(i) = mu.iter().position(|&m| !(m > 0.0)) {
        return Err(Error::Consistency(format!(
            "tuple {:?} has stationary mass {} (reducible chain)",
            chain.tuples[i], mu[i]
        )));
    }
    let n_states = chain.reachable_states.len();
    let n_options = chain.tuples.iter().map(|t| t.option + 1).max().unwrap_or(0);
    Ok(StationaryDistribution {
        tuples: chain.tuples.clone(),
        mu,
        n_states,
        n_options,
    })
}

/// Builds the chain and solves for its stationary distribution.
pub fn stationary_of(env: &Environment, behavior: &BehaviorPolicy) -> Result<StationaryDistribution> {
    let chain = build_chain(env, behavior)?;
    let mut s = stationary(&chain)?;
    s.n_options = env.n_options();
    Ok(s)
}

impl StationaryDistribution {
    /// `mu(x, omega)`, an `|X| x |Omega|` matrix.
    pub fn state_option(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_states, self.n_options);
        for (xi, p) in self.tuples.iter().zip(self.mu.iter()) {
            m[(xi.x, xi.option)] += p;
        }
        m
    }

    /// `mu_omega` as a vector over states.
    pub fn mu_omega(&self, option: usize) -> DVector<f64> {
        self.state_option().column(option).into_owned()
    }

    /// State marginal `mu(x)`.
    pub fn state_marginal(&self) -> DVector<f64> {
        let m = self.state_option();
        DVector::from_fn(self.n_states, |x, _| m.row(x).sum())
    }

    /// `gamma_pi = sum mu(x, omega) gamma_{x, omega}`, where `gamma_{x, omega}`
    /// is the probability of staying in the environment.
    pub fn gamma(&self, env: &Environment) -> Result<f64> {
        let m = self.state_option();
        let mut g = 0.0;
        for o in 0..env.n_options() {
            let t = termination_vector(env, env.option(o))?;
            g += m.column(o).dot(&t.map(|e| 1.0 - e));
        }
        Ok(g)
    }

    /// Stationary mass of tuples ending in a terminal outcome.
    pub fn terminal_flow(&self) -> f64 {
        self.tuples
            .iter()
            .zip(self.mu.iter())
            .filter(|(xi, _)| xi.next.is_terminal())
            .map(|(_, p)| p)
            .sum()
    }

    pub fn prob(&self, xi: &Xi) -> f64 {
        self.tuples
            .iter()
            .position(|t| t == xi)
            .map_or(0.0, |i| self.mu[i])
    }
}

/// Feature-level joint `mu(z, omega, z')`, where `z'` ranges over the
/// features followed by the terminal outcomes.
#[derive(Debug, Clone)]
pub struct FeatureKernel {
    /// Per option, `(|Z| + n_terminals) x |Z|` joint masses.
    pub joint: Vec<DMatrix<f64>>,
    /// `|Z| x |Omega|` masses `mu(z, omega)`.
    pub mass: DMatrix<f64>,
    pub n_features: usize,
}

pub fn feature_kernel(env: &Environment, dist: &StationaryDistribution) -> FeatureKernel {
    let nz = env.n_features();
    let rows = nz + env.n_terminals();
    let mut joint = vec![DMatrix::zeros(rows, nz); env.n_options()];
    let mut mass = DMatrix::zeros(nz, env.n_options());
    for (xi, &p) in dist.tuples.iter().zip(dist.mu.iter()) {
        let z = env.feature_of(xi.x);
        let row = match xi.next {
            Next::State(y) => env.feature_of(y),
            Next::Terminal(t) => nz + t,
        };
        joint[xi.option][(row, z)] += p;
        mass[(z, xi.option)] += p;
    }
    FeatureKernel {
        joint,
        mass,
        n_features: nz,
    }
}

impl FeatureKernel {
    pub fn has_mass(&self, z: usize, option: usize) -> bool {
        self.mass[(z, option)] > 0.0
    }

    /// `mu(. | z, omega)` over features then terminal outcomes.
    pub fn conditional(&self, z: usize, option: usize) -> Result<DVector<f64>> {
        let m = self.mass[(z, option)];
        if !(m > 0.0) {
            return Err(Error::ZeroMass(format!("feature {z}, option {option}")));
        }
        Ok(self.joint[option].column(z) / m)
    }

    /// Feature-to-feature part of the conditional kernel for one option;
    /// columns of zero-mass features are left at zero.
    pub fn transitions(&self, option: usize) -> DMatrix<f64> {
        let nz = self.n_features;
        DMatrix::from_fn(nz, nz, |zp, z| {
            let m = self.mass[(z, option)];
            if m > 0.0 {
                self.joint[option][(zp, z)] / m
            } else {
                0.0
            }
        })
    }

    /// Terminal part of the conditional kernel for one option.
    pub fn terminations(&self, option: usize) -> DMatrix<f64> {
        let nz = self.n_features;
        let nt = self.joint[option].nrows() - nz;
        DMatrix::from_fn(nt, nz, |t, z| {
            let m = self.mass[(z, option)];
            if m > 0.0 {
                self.joint[option][(nz + t, z)] / m
            } else {
                0.0
            }
        })
    }
}

/// Max-norm residual of the balance identity
/// `Pi_z mu_omega = (1 - gamma) pi(omega|z) Pi_z p0 + Pi_z T_omega Pi_z mu_omega
///   + pi(omega|z) sum_omega' Pi_z T_omega' Pi_z^c mu_omega'`
/// over all features and options.
pub fn verify_mu_identity(env: &Environment, behavior: &BehaviorPolicy, dist: &StationaryDistribution) -> Result<f64> {
    let gamma = dist.gamma(env)?;
    let mus: Vec<DVector<f64>> = (0..env.n_options()).map(|o| dist.mu_omega(o)).collect();
    let ts: Vec<DMatrix<f64>> = env
        .options()
        .iter()
        .map(|o| option_kernel(env, o))
        .collect::<Result<_>>()?;
    let fm = env.features();
    let mut worst: f64 = 0.0;
    for z in 0..env.n_features() {
        let pz = fm.projection(z);
        let pc = fm.complement(z);
        let inflow = (0..env.n_options()).fold(DVector::zeros(env.n_states()), |acc, o| {
            acc + &pz * &ts[o] * &pc * &mus[o]
        });
        for o in 0..env.n_options() {
            let w = behavior.prob(z, o);
            let lhs = &pz * &mus[o];
            let rhs = (&pz * env.p0()) * ((1.0 - gamma) * w) + &pz * &ts[o] * &pz * &mus[o] + &inflow * w;
            worst = worst.max((lhs - rhs).amax());
        }
    }
    Ok(worst)
}

/// One step of a committed simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub xi: Xi,
    pub feature: usize,
    /// Feature of `x'`, `None` when the episode ends.
    pub next_feature: Option<usize>,
    pub reward: f64,
}

/// Runs the committed behavior forever, restarting episodes; each call to
/// [`Walker::step`] yields the tuple of the current loop iteration.
#[derive(Debug, Clone)]
pub struct Walker {
    sampler: Sampler,
    behavior: Vec<Vec<(usize, f64)>>,
    committed: bool,
    state: Option<(usize, usize)>,
}

impl Walker {
    pub fn new(env: &Environment, behavior: &BehaviorPolicy, committed: bool) -> Result<Self> {
        check_behavior(env, behavior)?;
        let behavior = (0..env.n_features())
            .map(|z| {
                let mut acc = 0.0;
                behavior
                    .row(z)
                    .iter()
                    .enumerate()
                    .map(|(o, p)| {
                        acc += p;
                        (o, acc)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            sampler: Sampler::new(env),
            behavior,
            committed,
            state: None,
        })
    }

    fn draw_option<R: Rng + ?Sized>(&self, z: usize, rng: &mut R) -> usize {
        let table = &self.behavior[z];
        let u = rng.random::<f64>() * table.last().unwrap().1;
        table.iter().find(|(_, c)| u < *c).unwrap_or(table.last().unwrap()).0
    }

    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Transition {
        let (x, option) = match self.state {
            Some(s) => s,
            None => {
                let x = self.sampler.initial_state(rng);
                let o = self.draw_option(self.sampler.feature_of(x), rng);
                (x, o)
            }
        };
        let z = self.sampler.feature_of(x);
        let step = self.sampler.step(x, option, rng);
        self.state = match step.next {
            Next::Terminal(_) => None,
            Next::State(y) => {
                let zy = self.sampler.feature_of(y);
                let o = if self.committed && zy == z {
                    option
                } else {
                    self.draw_option(zy, rng)
                };
                Some((y, o))
            }
        };
        Transition {
            xi: Xi {
                x,
                option,
                next: step.next,
            },
            feature: z,
            next_feature: step.feature,
            reward: step.reward,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{FeatureMap, ReactivePolicy};
    use crate::rng::stream_rng;
    use crate::zoo;

    #[test]
    fn single_state_chain() {
        let env = Environment::from_parts(
            vec![DMatrix::zeros(1, 1)],
            DVector::from_element(1, 1.0),
            vec![0.0],
            FeatureMap::identity(1),
            None,
        )
        .unwrap();
        let b = BehaviorPolicy::uniform(1, 1);
        let chain = build_chain(&env, &b).unwrap();
        assert_eq!(chain.len(), 1);
        assert_eq!(chain.kernel[(0, 0)], 1.0);
        let mu = stationary(&chain).unwrap();
        assert!(verify_mu_identity(&env, &b, &mu).unwrap() < 1e-12);
    }

    #[test]
    fn corridor_chain_is_irreducible_and_excludes_impossible_tuples() {
        let env = zoo::corridor(3, -1.0).unwrap();
        let b = BehaviorPolicy::uniform(env.n_features(), env.n_options());
        let chain = build_chain(&env, &b).unwrap();
        assert!(chain.is_irreducible());
        let right = env.option_index("right").unwrap();
        assert!(chain.position(&Xi { x: 1, option: right, next: Next::State(2) }).is_some());
        assert!(chain.position(&Xi { x: 1, option: right, next: Next::State(0) }).is_none());
        for i in 0..chain.len() {
            assert!((chain.kernel.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn near_always_right_state_marginal_is_uniform() {
        let k = 5;
        let env = zoo::corridor(k, -1.0).unwrap();
        let right = env.option_index("right").unwrap();
        let b = BehaviorPolicy::epsilon_mix(&ReactivePolicy::constant(2, right), 1e-6, 2).unwrap();
        let mu = stationary_of(&env, &b).unwrap();
        let m = mu.state_marginal();
        for x in 0..=k {
            assert!((m[x] - 1.0 / (k as f64 + 1.0)).abs() < 1e-4);
        }
        let fk = feature_kernel(&env, &mu);
        let cond = fk.conditional(1, right).unwrap();
        assert!((cond[1] - (k as f64 - 1.0) / k as f64).abs() < 1e-3);
    }

    #[test]
    fn decomposition_and_restart_flow() {
        let (env, b) = zoo::fig4(0.3).unwrap();
        let mu = stationary_of(&env, &b).unwrap();
        let so = mu.state_option();
        for (xi, p) in mu.tuples.iter().zip(mu.mu.iter()) {
            let o = env.option(xi.option);
            let t = match xi.next {
                Next::State(y) => option_kernel(&env, o).unwrap()[(y, xi.x)],
                Next::Terminal(e) => env.option_termination(o).unwrap()[(e, xi.x)],
            };
            assert!((p - so[(xi.x, xi.option)] * t).abs() < 1e-10);
        }
        assert!((1.0 - mu.gamma(&env).unwrap() - mu.terminal_flow()).abs() < 1e-10);
    }

    #[test]
    fn committed_walker_keeps_option_inside_a_feature() {
        let env = zoo::corridor(4, -1.0).unwrap();
        let b = BehaviorPolicy::uniform(2, 2);
        let mut w = Walker::new(&env, &b, true).unwrap();
        let mut rng = stream_rng(3, 0);
        let mut prev: Option<Transition> = None;
        for _ in 0..10_000 {
            let t = w.step(&mut rng);
            if let Some(p) = prev {
                if p.next_feature == Some(t.feature) && p.feature == t.feature {
                    assert_eq!(p.xi.option, t.xi.option);
                }
            }
            prev = Some(t);
        }
    }
}
