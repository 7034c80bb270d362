//! Random instances for property tests and fuzzing.
//!
//! Every environment produced here keeps at least [`MIN_EXIT`] termination
//! mass in every column, so all of its policies are proper.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::env::{BehaviorPolicy, Environment, FeatureMap, OptionDist, ReactivePolicy, Terminal};
use crate::error::Result;

/// Smallest per-column termination probability.
pub const MIN_EXIT: f64 = 0.05;

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub max_states: usize,
    pub max_features: usize,
    pub max_actions: usize,
    /// Probability that a kernel entry is structurally zero.
    pub sparsity: f64,
}

impl Default for Shape {
    fn default() -> Self {
        Self {
            max_states: 12,
            max_features: 5,
            max_actions: 3,
            sparsity: 0.5,
        }
    }
}

/// Uniform sample from the probability simplex of dimension `n`.
pub fn simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Simplex sample whose support is a random nonempty subset.
fn sparse_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize, sparsity: f64) -> Vec<f64> {
    let keep = rng.random_range(0..n);
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            if i == keep || rng.random::<f64>() >= sparsity {
                Exp1.sample(rng)
            } else {
                0.0
            }
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Random surjective feature assignment.
fn random_features<R: Rng + ?Sized>(rng: &mut R, n: usize, nz: usize) -> FeatureMap {
    let mut assignment: Vec<usize> = (0..n).map(|x| if x < nz { x } else { rng.random_range(0..nz) }).collect();
    assignment.shuffle(rng);
    FeatureMap::new(assignment, nz).expect("assignment is in range")
}

struct Sizes {
    n: usize,
    nz: usize,
    nu: usize,
}

fn sizes<R: Rng + ?Sized>(rng: &mut R, shape: &Shape) -> Sizes {
    let n = rng.random_range(2..=shape.max_states.max(2));
    let nz = rng.random_range(1..=shape.max_features.min(n).max(1));
    let nu = rng.random_range(1..=shape.max_actions.max(1));
    Sizes { n, nz, nu }
}

fn random_options<R: Rng + ?Sized>(rng: &mut R, nu: usize) -> Result<Vec<OptionDist>> {
    (0..nu)
        .map(|o| {
            if rng.random::<f64>() < 0.5 {
                Ok(OptionDist::deterministic(format!("o{o}"), nu, o))
            } else {
                OptionDist::new(format!("o{o}"), simplex(rng, nu))
            }
        })
        .collect()
}

/// Assembles an environment with one rewarded exit. `column(u, x)` gives the
/// in-environment mass of column `x` under action `u`; the rest is split
/// between the exit and the plain terminal.
fn assemble<R: Rng + ?Sized>(
    rng: &mut R,
    sz: &Sizes,
    features: FeatureMap,
    p0: DVector<f64>,
    mut column: impl FnMut(&mut R, usize, usize) -> DVector<f64>,
) -> Result<Environment> {
    let mut kernels = Vec::with_capacity(sz.nu);
    let mut exits = Vec::with_capacity(sz.nu);
    for u in 0..sz.nu {
        let mut k = DMatrix::zeros(sz.n, sz.n);
        let mut e = DMatrix::zeros(1, sz.n);
        for x in 0..sz.n {
            let c = column(rng, u, x);
            let stay = c.sum();
            k.set_column(x, &c);
            e[(0, x)] = (1.0 - stay) * rng.random::<f64>();
        }
        kernels.push(k);
        exits.push(e);
    }
    let rewards = (0..sz.nz).map(|_| rng.random_range(-1.0..1.0)).collect();
    let exit = Terminal {
        name: "exit".into(),
        reward: rng.random_range(-2.0..2.0),
    };
    let options = random_options(rng, sz.nu)?;
    Environment::with_exits(kernels, vec![exit], exits, p0, rewards, features, Some(options))
}

fn stay_mass<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.3..(1.0 - MIN_EXIT))
}

/// Random proper environment.
pub fn random_env<R: Rng + ?Sized>(rng: &mut R, shape: &Shape) -> Result<Environment> {
    let sz = sizes(rng, shape);
    let features = random_features(rng, sz.n, sz.nz);
    let p0 = DVector::from_vec(sparse_simplex(rng, sz.n, shape.sparsity));
    let (n, sparsity) = (sz.n, shape.sparsity);
    assemble(rng, &sz, features, p0, |rng, _, _| {
        let m = stay_mass(rng);
        DVector::from_vec(sparse_simplex(rng, n, sparsity)) * m
    })
}

/// Random proper quasi-Markov environment: every entrance into a feature
/// follows the same distribution `sigma_z`.
pub fn random_quasi_markov_env<R: Rng + ?Sized>(rng: &mut R, shape: &Shape) -> Result<Environment> {
    let sz = sizes(rng, shape);
    let features = random_features(rng, sz.n, sz.nz);
    let n = sz.n;
    let sigma: Vec<DVector<f64>> = (0..sz.nz)
        .map(|z| {
            let members = features.states_of(z);
            let w = sparse_simplex(rng, members.len(), shape.sparsity);
            let mut s = DVector::zeros(n);
            for (&x, p) in members.iter().zip(w) {
                s[x] = p;
            }
            s
        })
        .collect();
    let p0 = simplex(rng, sz.nz)
        .into_iter()
        .enumerate()
        .fold(DVector::zeros(n), |acc, (z, p)| acc + &sigma[z] * p);
    let fm = features.clone();
    let sparsity = shape.sparsity;
    assemble(rng, &sz, features, p0, |rng, _, x| {
        let m = stay_mass(rng);
        let free = DVector::from_vec(sparse_simplex(rng, n, sparsity)) * m;
        let own = fm.feature_of(x);
        let mut c = DVector::zeros(n);
        for z in 0..fm.n_features() {
            let mass: f64 = fm.states_of(z).iter().map(|&y| free[y]).sum();
            if z == own {
                for &y in fm.states_of(z) {
                    c[y] = free[y];
                }
            } else {
                c += &sigma[z] * mass;
            }
        }
        c
    })
}

/// Random proper environment whose optimal action values are constant on
/// each feature: states of a feature share their feature-level dynamics,
/// exit probabilities and rewards, and differ only in how mass spreads
/// inside the next feature.
pub fn random_realizable_env<R: Rng + ?Sized>(rng: &mut R, shape: &Shape) -> Result<Environment> {
    let sz = sizes(rng, shape);
    let features = random_features(rng, sz.n, sz.nz);
    let (n, nz, nu) = (sz.n, sz.nz, sz.nu);
    // Feature-level kernels, exit probabilities.
    let base: Vec<DMatrix<f64>> = (0..nu)
        .map(|_| {
            let mut k = DMatrix::zeros(nz, nz);
            for z in 0..nz {
                let m = stay_mass(rng);
                let col = DVector::from_vec(sparse_simplex(rng, nz, shape.sparsity)) * m;
                k.set_column(z, &col);
            }
            k
        })
        .collect();
    let exit_share: Vec<Vec<f64>> = (0..nu).map(|_| (0..nz).map(|_| rng.random::<f64>()).collect()).collect();
    let spread = |rng: &mut R, z: usize, mass: f64, out: &mut DVector<f64>| {
        let members = features.states_of(z);
        for (&y, p) in members.iter().zip(sparse_simplex(rng, members.len(), shape.sparsity)) {
            out[y] += mass * p;
        }
    };
    let mut p0 = DVector::zeros(n);
    for (z, p) in simplex(rng, nz).into_iter().enumerate() {
        spread(rng, z, p, &mut p0);
    }
    let mut kernels = Vec::with_capacity(nu);
    let mut exits = Vec::with_capacity(nu);
    for u in 0..nu {
        let mut k = DMatrix::zeros(n, n);
        let mut e = DMatrix::zeros(1, n);
        for x in 0..n {
            let z = features.feature_of(x);
            let mut c = DVector::zeros(n);
            for zp in 0..nz {
                spread(rng, zp, base[u][(zp, z)], &mut c);
            }
            e[(0, x)] = (1.0 - c.sum()).max(0.0) * exit_share[u][z];
            k.set_column(x, &c);
        }
        kernels.push(k);
        exits.push(e);
    }
    let rewards = (0..nz).map(|_| rng.random_range(-1.0..1.0)).collect();
    let exit = Terminal {
        name: "exit".into(),
        reward: rng.random_range(-2.0..2.0),
    };
    Environment::with_exits(kernels, vec![exit], exits, p0, rewards, features, None)
}

/// Random behavior with every probability at least `floor / |Omega|`.
pub fn random_behavior<R: Rng + ?Sized>(rng: &mut R, n_features: usize, n_options: usize) -> BehaviorPolicy {
    let floor = 0.1;
    let dist = (0..n_features)
        .map(|_| {
            simplex(rng, n_options)
                .into_iter()
                .map(|p| (1.0 - floor) * p + floor / n_options as f64)
                .collect()
        })
        .collect();
    BehaviorPolicy::new(dist).expect("rows have full support")
}

pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, n_features: usize, n_options: usize) -> ReactivePolicy {
    ReactivePolicy::new((0..n_features).map(|_| rng.random_range(0..n_options)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::qstar_realizability;
    use crate::env::{is_proper, validate, DEFAULT_ENUMERATION_CAP};
    use crate::quasi::is_quasi_markov;
    use crate::rng::stream_rng;

    #[test]
    fn generated_instances_have_their_properties() {
        let shape = Shape::default();
        for i in 0..30 {
            let mut rng = stream_rng(11, i);
            let env = random_env(&mut rng, &shape).unwrap();
            assert!(validate(&env).is_empty());
            assert!(is_proper(&env, DEFAULT_ENUMERATION_CAP).unwrap().proper);
            let q = random_quasi_markov_env(&mut rng, &shape).unwrap();
            assert!(validate(&q).is_empty());
            assert!(is_quasi_markov(&q));
            let r = random_realizable_env(&mut rng, &shape).unwrap();
            assert!(validate(&r).is_empty());
            assert!(qstar_realizability(&r).unwrap().realizable);
        }
    }
}
