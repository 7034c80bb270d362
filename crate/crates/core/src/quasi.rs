//! Entrance spaces, quasi-Markov environments and their aggregate MDPs.

use nalgebra::{DMatrix, DVector};

use crate::dp::policy_value;
use crate::env::{option_kernel, Environment, FeatureMap, OptionDist, ReactivePolicy, Terminal};
use crate::error::{Error, Result};
use crate::linalg::{solve, span_basis, spectral_radius};

/// Orthonormal basis of a feature's entrance space.
#[derive(Debug, Clone, PartialEq)]
pub struct EntranceSpace {
    pub feature: usize,
    /// `|X| x dim` matrix whose columns span the space.
    pub basis: DMatrix<f64>,
}

impl EntranceSpace {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// The vectors spanning the entrance space of `z`: every column
/// `(Pi_z T_u)_{:, x}` with `x` outside `z`, and `Pi_z p0`. Zero vectors are dropped.
pub fn entrance_generators(env: &Environment, z: usize) -> Vec<DVector<f64>> {
    let fm = env.features();
    let inside = |y: usize| fm.feature_of(y) == z;
    let restrict = |v: DVector<f64>| DVector::from_fn(v.len(), |y, _| if inside(y) { v[y] } else { 0.0 });
    let mut out = Vec::new();
    for k in env.kernels() {
        for x in (0..env.n_states()).filter(|&x| !inside(x)) {
            let g = restrict(k.column(x).into_owned());
            if g.amax() > 0.0 {
                out.push(g);
            }
        }
    }
    let g = restrict(env.p0().clone());
    if g.amax() > 0.0 {
        out.push(g);
    }
    out
}

pub fn entrance_space(env: &Environment, z: usize) -> EntranceSpace {
    EntranceSpace {
        feature: z,
        basis: span_basis(&entrance_generators(env, z), env.n_states()),
    }
}

pub fn entrance_dims(env: &Environment) -> Vec<usize> {
    (0..env.n_features()).map(|z| entrance_space(env, z).dim()).collect()
}

/// Every entrance space has dimension at most one.
pub fn is_quasi_markov(env: &Environment) -> bool {
    entrance_dims(env).iter().all(|&d| d <= 1)
}

/// Entrance matrix `Sigma` (`|X| x |Z|`): the normalized entrance
/// distribution for one-dimensional entrance spaces, uniform over the
/// feature's states when the space is trivial.
pub fn entrance_matrix(env: &Environment) -> Result<DMatrix<f64>> {
    let fm = env.features();
    let mut sigma = DMatrix::zeros(env.n_states(), env.n_features());
    for z in 0..env.n_features() {
        let gens = entrance_generators(env, z);
        let dim = span_basis(&gens, env.n_states()).ncols();
        if dim > 1 {
            return Err(Error::NotQuasiMarkov { feature: z, dim });
        }
        let col = if dim == 0 {
            let members = fm.states_of(z);
            let w = 1.0 / members.len() as f64;
            DVector::from_fn(env.n_states(), |x, _| if fm.feature_of(x) == z { w } else { 0.0 })
        } else {
            let total = gens.iter().fold(DVector::zeros(env.n_states()), |acc, g| acc + g);
            let mass = total.sum();
            total / mass
        };
        sigma.set_column(z, &col);
    }
    Ok(sigma)
}

/// Largest violation of `p0 = Sigma Phi p0` and
/// `Pi_z T_u Pi_z^c = Pi_z Sigma Phi T_u Pi_z^c` over all `z, u`.
pub fn entrance_identity_residual(env: &Environment, sigma: &DMatrix<f64>) -> f64 {
    let phi = env.features().matrix();
    let sp = sigma * &phi;
    let mut worst = (env.p0() - &sp * env.p0()).amax();
    for z in 0..env.n_features() {
        let pz = env.features().projection(z);
        let pc = env.features().complement(z);
        for k in env.kernels() {
            let lhs = &pz * k * &pc;
            let rhs = &pz * &sp * k * &pc;
            worst = worst.max((lhs - rhs).amax());
        }
    }
    worst
}

fn block(fm: &FeatureMap, m: &DMatrix<f64>, z: usize) -> DMatrix<f64> {
    let s = fm.states_of(z);
    DMatrix::from_fn(s.len(), s.len(), |i, j| m[(s[i], s[j])])
}

/// Spectral radius of `Pi_z T_omega`, the intra-feature part of the option
/// kernel. Errors if it is not below one.
pub fn spectral_radius_intra(env: &Environment, z: usize, option: usize) -> Result<f64> {
    let t = option_kernel(env, env.option(option))?;
    let rho = spectral_radius(&block(env.features(), &t, z));
    if rho >= 1.0 - 1e-12 {
        return Err(Error::PropernessViolation {
            feature: z,
            option,
            radius: rho,
        });
    }
    Ok(rho)
}

/// Disaggregation `psi_z^omega`: the normalized solution of
/// `(I - Pi_z T_omega) psi = sigma_z`.
pub fn disaggregation(env: &Environment, sigma: &DMatrix<f64>, option: usize, z: usize) -> Result<DVector<f64>> {
    spectral_radius_intra(env, z, option)?;
    let fm = env.features();
    let s = fm.states_of(z);
    let t = option_kernel(env, env.option(option))?;
    let a = DMatrix::identity(s.len(), s.len()) - block(fm, &t, z);
    let b = DVector::from_fn(s.len(), |i, _| sigma[(s[i], z)]);
    let psi = solve(&a, &b, &format!("disaggregation of feature {z}"))?;
    let mass = psi.sum();
    if !(mass > 0.0) {
        return Err(Error::ZeroMass(format!("disaggregation of feature {z} has mass {mass}")));
    }
    let mut out = DVector::zeros(env.n_states());
    for (i, &x) in s.iter().enumerate() {
        out[x] = psi[i] / mass;
    }
    Ok(out)
}

/// Feature-space MDP of a quasi-Markov environment. Its states are the
/// features and its actions are the options.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateMdp {
    /// Per option, `|Z| x |Z|` kernel `Phi T_omega Psi_omega`.
    pub kernels: Vec<DMatrix<f64>>,
    /// Per option, `n_terminals x |Z|` termination probabilities.
    pub terminations: Vec<DMatrix<f64>>,
    pub p0: DVector<f64>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<Terminal>,
    pub sigma: DMatrix<f64>,
    /// Per option, `|X| x |Z|` disaggregation matrix.
    pub psi: Vec<DMatrix<f64>>,
    pub feature_names: Vec<String>,
    pub option_names: Vec<String>,
}

pub fn aggregate_mdp(env: &Environment) -> Result<AggregateMdp> {
    let sigma = entrance_matrix(env)?;
    aggregate_with(env, sigma)
}

pub(crate) fn aggregate_with(env: &Environment, sigma: DMatrix<f64>) -> Result<AggregateMdp> {
    let phi = env.features().matrix();
    let nz = env.n_features();
    let mut kernels = Vec::new();
    let mut terminations = Vec::new();
    let mut psis = Vec::new();
    for o in 0..env.n_options() {
        let mut psi = DMatrix::zeros(env.n_states(), nz);
        for z in 0..nz {
            psi.set_column(z, &disaggregation(env, &sigma, o, z)?);
        }
        let t = option_kernel(env, env.option(o))?;
        kernels.push(&phi * t * &psi);
        terminations.push(env.option_termination(env.option(o))? * &psi);
        psis.push(psi);
    }
    Ok(AggregateMdp {
        kernels,
        terminations,
        p0: &phi * env.p0(),
        rewards: env.rewards()[..nz].to_vec(),
        terminals: env.terminals().to_vec(),
        sigma,
        psi: psis,
        feature_names: env.feature_names().to_vec(),
        option_names: env.options().iter().map(|o| o.name().to_string()).collect(),
    })
}

impl AggregateMdp {
    pub fn n_features(&self) -> usize {
        self.p0.len()
    }

    /// The aggregate MDP as an environment whose states are features (each
    /// its own feature) and whose actions are the options.
    pub fn to_environment(&self) -> Result<Environment> {
        let nz = self.n_features();
        let no = self.kernels.len();
        let exits = self.terminals[1..].to_vec();
        let exit_kernels = self
            .terminations
            .iter()
            .map(|t| t.rows(1, t.nrows() - 1).into_owned())
            .collect();
        let options = (0..no)
            .map(|o| OptionDist::deterministic(self.option_names[o].clone(), no, o))
            .collect();
        Environment::with_exits(
            self.kernels.clone(),
            exits,
            exit_kernels,
            self.p0.clone(),
            self.rewards.clone(),
            FeatureMap::identity(nz),
            Some(options),
        )?
        .with_names(
            self.feature_names.clone(),
            self.option_names.clone(),
            self.feature_names.clone(),
        )
    }
}

/// `|| v_hat_pi - Sigma^T v_bar_pi ||_inf`: the aggregate MDP's value of `pi`
/// against the entrance-averaged value in the environment.
pub fn verify_entrance_value(env: &Environment, policy: &ReactivePolicy) -> Result<f64> {
    let agg = aggregate_mdp(env)?;
    let v_hat = policy_value(&agg.to_environment()?, policy)?;
    let v_bar = policy_value(env, policy)?;
    Ok((v_hat - agg.sigma.transpose() * v_bar).amax())
}
