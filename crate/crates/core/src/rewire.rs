//! Rewirings: predicates, the behavior-averaged rewiring, and robustness
//! checks by exhaustive enumeration (behavior-averaged case) or by searching
//! the entrance polytopes (plain and generalized cases).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::chain::{stationary_of, StationaryDistribution};
use crate::dp::{all_returns, optimal_reactive, policy_return};
use crate::env::{is_proper, policy_count, BehaviorPolicy, Environment, ReactivePolicy};
use crate::error::{Error, Result};
use crate::linalg::distance_to_span;
use crate::quasi::{aggregate_with, entrance_generators, entrance_space, is_quasi_markov, AggregateMdp};
use crate::rng::stream_rng;

/// Tolerance for conditions (i) to (iii).
pub const REWIRE_TOL: f64 = 1e-9;
/// Residual tolerance for entrance-space containment.
pub const SPAN_TOL: f64 = 1e-8;
/// Suboptimality a witness policy must show in the original environment.
pub const REFUTE_GAP: f64 = 1e-8;
/// Default number of random interior rewirings.
pub const DEFAULT_SAMPLES: usize = 64;
/// Largest vertex product that is searched exhaustively.
pub const EXHAUSTIVE_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewiringCondition {
    /// Feature masses of the initial distribution differ.
    InitialFeatureMass,
    /// Feature masses of some kernel column (or its terminal outcomes) differ.
    FeatureMass { action: usize, state: usize },
    /// Intra-feature dynamics differ.
    IntraFeature { action: usize, state: usize },
    /// Entrance space not contained in the original one.
    EntranceSpace { feature: usize },
}

impl std::fmt::Display for RewiringCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RewiringCondition::InitialFeatureMass => write!(f, "(i) initial feature mass"),
            RewiringCondition::FeatureMass { action, state } => {
                write!(f, "(ii) feature mass of action {action} at state {state}")
            }
            RewiringCondition::IntraFeature { action, state } => {
                write!(f, "(iii) intra-feature dynamics of action {action} at state {state}")
            }
            RewiringCondition::EntranceSpace { feature } => {
                write!(f, "(iv) entrance space of feature {feature}")
            }
        }
    }
}

fn check_shapes(candidate: &Environment, base: &Environment) -> Result<()> {
    if candidate.n_states() != base.n_states()
        || candidate.n_actions() != base.n_actions()
        || candidate.features() != base.features()
        || candidate.n_terminals() != base.n_terminals()
    {
        return Err(Error::Dimension("rewiring candidate differs in shape or feature map".into()));
    }
    Ok(())
}

/// Checks conditions (i) to (iii); returns the first violated one.
pub fn is_generalized_rewiring(candidate: &Environment, base: &Environment) -> Result<Option<RewiringCondition>> {
    check_shapes(candidate, base)?;
    let phi = base.features().matrix();
    if (&phi * candidate.p0() - &phi * base.p0()).amax() > REWIRE_TOL {
        return Ok(Some(RewiringCondition::InitialFeatureMass));
    }
    let fm = base.features();
    for u in 0..base.n_actions() {
        let fc = &phi * candidate.kernel(u);
        let fb = &phi * base.kernel(u);
        let ec = candidate.termination_matrix(u);
        let eb = base.termination_matrix(u);
        for x in 0..base.n_states() {
            let feature_gap = (fc.column(x) - fb.column(x)).amax();
            let exit_gap = (ec.column(x) - eb.column(x)).amax();
            if feature_gap > REWIRE_TOL || exit_gap > REWIRE_TOL {
                return Ok(Some(RewiringCondition::FeatureMass { action: u, state: x }));
            }
        }
        for x in 0..base.n_states() {
            for y in 0..base.n_states() {
                if fm.feature_of(x) == fm.feature_of(y)
                    && (candidate.kernel(u)[(y, x)] - base.kernel(u)[(y, x)]).abs() > REWIRE_TOL
                {
                    return Ok(Some(RewiringCondition::IntraFeature { action: u, state: x }));
                }
            }
        }
    }
    Ok(None)
}

/// Conditions (i) to (iv); returns the first violated one.
pub fn is_rewiring(candidate: &Environment, base: &Environment) -> Result<Option<RewiringCondition>> {
    if let Some(c) = is_generalized_rewiring(candidate, base)? {
        return Ok(Some(c));
    }
    for z in 0..base.n_features() {
        let original = entrance_space(base, z);
        let rewired = entrance_space(candidate, z);
        for v in rewired.basis.column_iter() {
            if distance_to_span(&original.basis, &v.into_owned()) > SPAN_TOL {
                return Ok(Some(RewiringCondition::EntranceSpace { feature: z }));
            }
        }
    }
    Ok(None)
}

/// Replaces every entrance into a feature by `entrances[z]`, scaled by the
/// mass that enters; intra-feature dynamics and terminal outcomes are kept.
pub fn rewire_with(env: &Environment, entrances: &DMatrix<f64>) -> Result<Environment> {
    let fm = env.features();
    let phi = fm.matrix();
    let n = env.n_states();
    let p0 = entrances * (&phi * env.p0());
    let kernels = env
        .kernels()
        .iter()
        .map(|k| {
            let mass = &phi * k;
            DMatrix::from_fn(n, n, |y, x| {
                let zy = fm.feature_of(y);
                if zy == fm.feature_of(x) {
                    k[(y, x)]
                } else {
                    entrances[(y, zy)] * mass[(zy, x)]
                }
            })
        })
        .collect();
    env.with_dynamics(p0, kernels)
}

/// The behavior-averaged rewiring together with its ingredients.
#[derive(Debug, Clone)]
pub struct PiRewiring {
    pub env: Environment,
    /// `|X| x |Z|` entrance distributions.
    pub sigma: DMatrix<f64>,
    pub stationary: StationaryDistribution,
}

/// Entrance distribution of each feature averaged over the stationary
/// behavior, `sum_omega Pi_z T_omega Pi_z^c mu_omega + (1 - gamma) Pi_z p0`,
/// normalized. Features the behavior never enters get the normalized sum of
/// their entrance generators, or the uniform distribution when they have none.
pub fn pi_entrances(env: &Environment, dist: &StationaryDistribution) -> Result<DMatrix<f64>> {
    let fm = env.features();
    let gamma = dist.gamma(env)?;
    let mut sigma = DMatrix::zeros(env.n_states(), env.n_features());
    let ts: Vec<DMatrix<f64>> = env
        .options()
        .iter()
        .map(|o| crate::env::option_kernel(env, o))
        .collect::<Result<_>>()?;
    for z in 0..env.n_features() {
        let pz = fm.projection(z);
        let pc = fm.complement(z);
        let mut s = (&pz * env.p0()) * (1.0 - gamma);
        for (o, t) in ts.iter().enumerate() {
            s += &pz * t * &pc * dist.mu_omega(o);
        }
        let mass = s.sum();
        let fallback: DVector<f64> = entrance_generators(env, z)
            .into_iter()
            .fold(DVector::zeros(env.n_states()), |a, g| a + g);
        let col = if mass > 0.0 {
            s / mass
        } else if fallback.sum() > 0.0 {
            let total = fallback.sum();
            fallback / total
        } else {
            let w = 1.0 / fm.states_of(z).len() as f64;
            DVector::from_fn(env.n_states(), |x, _| if fm.feature_of(x) == z { w } else { 0.0 })
        };
        sigma.set_column(z, &col);
    }
    Ok(sigma)
}

/// Builds the behavior-averaged rewiring and checks that it is a
/// quasi-Markov rewiring of `env` whose policies are all proper (the proper
/// check is skipped when enumeration would exceed `cap`).
pub fn pi_rewiring(env: &Environment, behavior: &BehaviorPolicy, cap: u64) -> Result<PiRewiring> {
    let dist = stationary_of(env, behavior)?;
    let sigma = pi_entrances(env, &dist)?;
    let rewired = rewire_with(env, &sigma)?;
    if let Some(c) = is_rewiring(&rewired, env)? {
        return Err(Error::Consistency(format!("averaged rewiring violates {c}")));
    }
    if !is_quasi_markov(&rewired) {
        return Err(Error::Consistency("averaged rewiring is not quasi-Markov".into()));
    }
    if policy_count(env, cap).is_ok() {
        let p = is_proper(&rewired, cap)?;
        if let Some((policy, x)) = p.counterexample {
            return Err(Error::Consistency(format!(
                "averaged rewiring has improper policy {policy} trapped at state {x}"
            )));
        }
    }
    Ok(PiRewiring {
        env: rewired,
        sigma,
        stationary: dist,
    })
}

/// Aggregate MDP of the behavior-averaged rewiring.
pub fn pi_mdp(env: &Environment, behavior: &BehaviorPolicy, cap: u64) -> Result<AggregateMdp> {
    let r = pi_rewiring(env, behavior, cap)?;
    aggregate_with(&r.env, r.sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictKind {
    ExactPass,
    SampledPass,
    Refuted,
}

impl std::fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VerdictKind::ExactPass => "exact-pass",
            VerdictKind::SampledPass => "sampled-pass",
            VerdictKind::Refuted => "refuted",
        })
    }
}

/// A rewiring together with one of its optimal policies that is suboptimal
/// in the original environment.
#[derive(Debug, Clone)]
pub struct Witness {
    pub rewiring: Environment,
    pub policy: ReactivePolicy,
    /// Return of `policy` in the rewiring (its optimum there).
    pub rewired_return: f64,
    /// Return of `policy` in the original environment.
    pub original_return: f64,
    /// Best reactive return in the original environment.
    pub optimal_return: f64,
}

#[derive(Debug, Clone)]
pub struct RewiringVerdict {
    pub kind: VerdictKind,
    pub witness: Option<Witness>,
    pub samples_tried: usize,
    /// Candidates skipped because some policy was improper in them.
    pub skipped_improper: usize,
}

/// Tests every optimal policy of `candidate` in `env`.
fn refute_with(
    env: &Environment,
    env_returns: &[f64],
    optimum: f64,
    candidate: Environment,
    cap: u64,
) -> Result<Option<Witness>> {
    let opt = optimal_reactive(&candidate, cap)?;
    for p in &opt.policies {
        let j = env_returns[p.index(env.n_options()) as usize];
        if j < optimum - REFUTE_GAP {
            return Ok(Some(Witness {
                rewiring: candidate,
                policy: p.clone(),
                rewired_return: opt.value,
                original_return: j,
                optimal_return: optimum,
            }));
        }
    }
    Ok(None)
}

/// Exact check that every optimal reactive policy of the behavior-averaged
/// rewiring is optimal in `env`.
pub fn check_pi_rewire_robust(env: &Environment, behavior: &BehaviorPolicy, cap: u64) -> Result<RewiringVerdict> {
    let returns = all_returns(env, cap)?;
    let optimum = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rewired = pi_rewiring(env, behavior, cap)?;
    let witness = refute_with(env, &returns, optimum, rewired.env, cap)?;
    Ok(RewiringVerdict {
        kind: if witness.is_some() { VerdictKind::Refuted } else { VerdictKind::ExactPass },
        witness,
        samples_tried: 1,
        skipped_improper: 0,
    })
}

/// One entrance slot: a column (or the initial distribution) that moves
/// mass into `feature` from outside it.
#[derive(Debug, Clone)]
struct Slot {
    feature: usize,
    /// `None` for the initial distribution.
    source: Option<(usize, usize)>,
    mass: f64,
    /// Normalized original entrance distribution.
    original: DVector<f64>,
}

/// Enumerates and samples rewirings of an environment.
#[derive(Debug, Clone)]
pub struct RewireSearch {
    base: Environment,
    slots: Vec<Slot>,
    /// Per feature, candidate entrance distributions (polytope vertices).
    vertices: Vec<Vec<DVector<f64>>>,
    exhaustive: bool,
    n_samples: usize,
    seed: u64,
    n_candidates: usize,
}

fn dedup(mut points: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for p in points.drain(..) {
        if !out.iter().any(|q| (q - &p).amax() <= 1e-9) {
            out.push(p);
        }
    }
    out
}

impl RewireSearch {
    /// `generalized` lets entrances range over every distribution on the
    /// feature's states; otherwise they range over the hull of the original
    /// entrance distributions.
    pub fn new(env: &Environment, generalized: bool, n_samples: usize, seed: u64) -> Self {
        let fm = env.features();
        let n = env.n_states();
        let phi = fm.matrix();
        let mut slots = Vec::new();
        for z in 0..env.n_features() {
            let restrict =
                |v: DVector<f64>| DVector::from_fn(n, |y, _| if fm.feature_of(y) == z { v[y] } else { 0.0 });
            let p = restrict(env.p0().clone());
            if p.sum() > 0.0 {
                slots.push(Slot {
                    feature: z,
                    source: None,
                    mass: p.sum(),
                    original: &p / p.sum(),
                });
            }
            for u in 0..env.n_actions() {
                for x in (0..n).filter(|&x| fm.feature_of(x) != z) {
                    let m = (&phi * env.kernel(u))[(z, x)];
                    if m > 0.0 {
                        let g = restrict(env.kernel(u).column(x).into_owned());
                        slots.push(Slot {
                            feature: z,
                            source: Some((u, x)),
                            mass: m,
                            original: g / m,
                        });
                    }
                }
            }
        }
        let vertices: Vec<Vec<DVector<f64>>> = (0..env.n_features())
            .map(|z| {
                if generalized {
                    fm.states_of(z)
                        .iter()
                        .map(|&x| DVector::from_fn(n, |y, _| if y == x { 1.0 } else { 0.0 }))
                        .collect()
                } else {
                    dedup(slots.iter().filter(|s| s.feature == z).map(|s| s.original.clone()).collect())
                }
            })
            .collect();
        let product = slots
            .iter()
            .try_fold(1usize, |acc, s| acc.checked_mul(vertices[s.feature].len().max(1)))
            .filter(|&p| p <= EXHAUSTIVE_CAP);
        let structured = match product {
            Some(p) => p,
            None => {
                let single: usize = slots.iter().map(|s| vertices[s.feature].len()).sum();
                let per_feature: usize = (0..env.n_features()).map(|z| vertices[z].len()).sum();
                single + per_feature
            }
        };
        Self {
            base: env.clone(),
            exhaustive: product.is_some(),
            n_candidates: structured + n_samples,
            slots,
            vertices,
            n_samples,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.n_candidates
    }

    pub fn is_empty(&self) -> bool {
        self.n_candidates == 0
    }

    pub fn is_exhaustive(&self) -> bool {
        self.exhaustive
    }

    fn structured_len(&self) -> usize {
        self.n_candidates - self.n_samples
    }

    /// Entrance choice per slot for candidate `i`.
    fn choice(&self, i: usize) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = self.slots.iter().map(|s| s.original.clone()).collect();
        if i >= self.structured_len() {
            let mut rng = stream_rng(self.seed, i as u64);
            for (k, s) in self.slots.iter().enumerate() {
                let verts = &self.vertices[s.feature];
                let w: Vec<f64> = verts.iter().map(|_| Exp1.sample(&mut rng)).collect();
                let total: f64 = w.iter().sum();
                out[k] = verts
                    .iter()
                    .zip(&w)
                    .fold(DVector::zeros(self.base.n_states()), |acc, (v, wi)| acc + v * (wi / total));
                // Occasionally keep a slot at a vertex to mix boundary points in.
                if rng.random::<f64>() < 0.25 {
                    out[k] = verts[rng.random_range(0..verts.len())].clone();
                }
            }
            return out;
        }
        if self.exhaustive {
            let mut rest = i;
            for (k, s) in self.slots.iter().enumerate() {
                let verts = &self.vertices[s.feature];
                out[k] = verts[rest % verts.len()].clone();
                rest /= verts.len();
            }
            return out;
        }
        let mut j = i;
        for (k, s) in self.slots.iter().enumerate() {
            let verts = &self.vertices[s.feature];
            if j < verts.len() {
                out[k] = verts[j].clone();
                return out;
            }
            j -= verts.len();
        }
        for z in 0..self.vertices.len() {
            if j < self.vertices[z].len() {
                for (k, s) in self.slots.iter().enumerate() {
                    if s.feature == z {
                        out[k] = self.vertices[z][j].clone();
                    }
                }
                return out;
            }
            j -= self.vertices[z].len();
        }
        out
    }

    /// The `i`-th candidate rewiring.
    pub fn candidate(&self, i: usize) -> Result<Environment> {
        let env = &self.base;
        let fm = env.features();
        let n = env.n_states();
        let choice = self.choice(i);
        let mut p0 = DVector::from_fn(n, |x, _| env.p0()[x]);
        let mut kernels: Vec<DMatrix<f64>> = env.kernels().to_vec();
        for (s, d) in self.slots.iter().zip(&choice) {
            let members = fm.states_of(s.feature);
            match s.source {
                None => {
                    for &y in members {
                        p0[y] = s.mass * d[y];
                    }
                }
                Some((u, x)) => {
                    for &y in members {
                        kernels[u][(y, x)] = s.mass * d[y];
                    }
                }
            }
        }
        env.with_dynamics(p0, kernels)
    }
}

fn search(env: &Environment, generalized: bool, n_samples: usize, seed: u64, cap: u64) -> Result<RewiringVerdict> {
    let returns = all_returns(env, cap)?;
    let optimum = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rs = RewireSearch::new(env, generalized, n_samples, seed);
    let outcomes: Vec<Result<Option<Option<Witness>>>> = (0..rs.len())
        .into_par_iter()
        .map(|i| {
            let cand = rs.candidate(i)?;
            match refute_with(env, &returns, optimum, cand, cap) {
                Ok(w) => Ok(Some(w)),
                // Some policy is improper in this candidate: not admissible.
                Err(Error::Singular(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut skipped = 0;
    let mut tried = 0;
    for o in outcomes {
        tried += 1;
        match o? {
            None => skipped += 1,
            Some(Some(w)) => {
                return Ok(RewiringVerdict {
                    kind: VerdictKind::Refuted,
                    witness: Some(w),
                    samples_tried: tried,
                    skipped_improper: skipped,
                })
            }
            Some(None) => {}
        }
    }
    Ok(RewiringVerdict {
        kind: VerdictKind::SampledPass,
        witness: None,
        samples_tried: tried,
        skipped_improper: skipped,
    })
}

/// Searches rewirings whose entrances stay in the hull of the original
/// entrance distributions. Refutations are exact; a pass is only sampled.
pub fn check_rewire_robust(env: &Environment, n_samples: usize, seed: u64, cap: u64) -> Result<RewiringVerdict> {
    search(env, false, n_samples, seed, cap)
}

/// As [`check_rewire_robust`] with entrances ranging over all distributions
/// on each feature's states.
pub fn check_generalized_rewire_robust(
    env: &Environment,
    n_samples: usize,
    seed: u64,
    cap: u64,
) -> Result<RewiringVerdict> {
    search(env, true, n_samples, seed, cap)
}

/// Return of `policy` in `env`, for reporting witnesses.
pub fn witness_gap(env: &Environment, w: &Witness) -> Result<f64> {
    Ok(w.optimal_return - policy_return(env, &w.policy)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::DEFAULT_ENUMERATION_CAP as CAP;
    use crate::zoo::{self, Fig3Variant};

    #[test]
    fn identity_and_variants() {
        let a = zoo::fig3(Fig3Variant::A).unwrap();
        let b = zoo::fig3(Fig3Variant::B).unwrap();
        let d = zoo::fig3(Fig3Variant::D).unwrap();
        assert_eq!(is_rewiring(&a, &a).unwrap(), None);
        assert_eq!(is_rewiring(&b, &a).unwrap(), None);
        assert_eq!(is_generalized_rewiring(&d, &a).unwrap(), None);
        assert!(matches!(
            is_rewiring(&d, &a).unwrap(),
            Some(RewiringCondition::EntranceSpace { .. })
        ));
    }

    #[test]
    fn perturbed_intra_entry_violates_condition_iii() {
        let a = zoo::fig3(Fig3Variant::A).unwrap();
        let right = a.action_index("right").unwrap();
        let (c, d) = (a.state_index("c").unwrap(), a.state_index("d").unwrap());
        let mut k = a.kernels().to_vec();
        k[right][(d, c)] = 0.5;
        k[right][(c, c)] = 0.5;
        let bad = a.with_dynamics(a.p0().clone(), k).unwrap();
        assert!(matches!(
            is_generalized_rewiring(&bad, &a).unwrap(),
            Some(RewiringCondition::IntraFeature { .. })
        ));
    }

    #[test]
    fn fig4_entrance_split() {
        let delta = 0.3;
        let (env, b) = zoo::fig4(delta).unwrap();
        let r = pi_rewiring(&env, &b, CAP).unwrap();
        let z = env.feature_index("z").unwrap();
        let (c, d) = (env.state_index("c").unwrap(), env.state_index("d").unwrap());
        assert!((r.sigma[(c, z)] - 1.0 / (1.0 + delta)).abs() < 1e-12);
        assert!((r.sigma[(d, z)] - delta / (1.0 + delta)).abs() < 1e-12);
    }

    #[test]
    fn quasi_markov_env_is_its_own_pi_rewiring() {
        let env = zoo::corridor(5, -1.0).unwrap();
        let b = BehaviorPolicy::uniform(2, 2);
        let r = pi_rewiring(&env, &b, CAP).unwrap();
        for u in 0..2 {
            assert!((r.env.kernel(u) - env.kernel(u)).amax() < 1e-10);
        }
        assert!((r.env.p0() - env.p0()).amax() < 1e-10);
    }

    #[test]
    fn fig3_verdicts() {
        let a = zoo::fig3(Fig3Variant::A).unwrap();
        let d = zoo::fig3(Fig3Variant::D).unwrap();
        assert_eq!(check_rewire_robust(&a, 16, 1, CAP).unwrap().kind, VerdictKind::SampledPass);
        let v = check_rewire_robust(&d, 16, 1, CAP).unwrap();
        assert_eq!(v.kind, VerdictKind::Refuted);
        let w = v.witness.unwrap();
        assert!(w.original_return < w.optimal_return - REFUTE_GAP);
        assert_eq!(is_rewiring(&w.rewiring, &d).unwrap(), None);
        let g = check_generalized_rewire_robust(&a, 16, 1, CAP).unwrap();
        assert_eq!(g.kind, VerdictKind::Refuted);
        assert_eq!(is_generalized_rewiring(&g.witness.unwrap().rewiring, &a).unwrap(), None);
    }

    #[test]
    fn prr_and_fig4_verdicts() {
        let (env, b) = zoo::prr(0.3).unwrap();
        assert_eq!(check_pi_rewire_robust(&env, &b, CAP).unwrap().kind, VerdictKind::ExactPass);
        assert_eq!(check_rewire_robust(&env, 16, 2, CAP).unwrap().kind, VerdictKind::Refuted);
        let (env, b) = zoo::fig4(0.3).unwrap();
        assert_eq!(check_pi_rewire_robust(&env, &b, CAP).unwrap().kind, VerdictKind::Refuted);
        assert_eq!(check_rewire_robust(&env, 16, 2, CAP).unwrap().kind, VerdictKind::Refuted);
    }
}
