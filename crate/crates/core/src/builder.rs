//! Name-based construction of environments.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::env::{Environment, FeatureMap, OptionDist, Terminal};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
enum Target {
    State(usize),
    Exit(usize),
}

/// Incremental builder keyed by state, action, feature and exit names.
///
/// Transitions listed twice accumulate. Unlisted transitions are zero, and
/// unlisted feature rewards are zero.
#[derive(Debug, Clone)]
pub struct EnvBuilder {
    states: Vec<String>,
    actions: Vec<String>,
    features: Vec<String>,
    assignment: Vec<Option<usize>>,
    exits: Vec<Terminal>,
    transitions: Vec<(usize, usize, Target, f64)>,
    p0: Vec<f64>,
    rewards: HashMap<usize, f64>,
    options: Vec<(String, Vec<f64>)>,
}

impl EnvBuilder {
    pub fn new<S: Into<String>, A: Into<String>>(
        states: impl IntoIterator<Item = S>,
        actions: impl IntoIterator<Item = A>,
    ) -> Self {
        let states: Vec<String> = states.into_iter().map(Into::into).collect();
        let n = states.len();
        Self {
            states,
            actions: actions.into_iter().map(Into::into).collect(),
            features: Vec::new(),
            assignment: vec![None; n],
            exits: Vec::new(),
            transitions: Vec::new(),
            p0: vec![0.0; n],
            rewards: HashMap::new(),
            options: Vec::new(),
        }
    }

    fn state(&self, name: &str) -> Result<usize> {
        self.states
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::format(format!("unknown state '{name}'")))
    }

    fn action(&self, name: &str) -> Result<usize> {
        self.actions
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::format(format!("unknown action '{name}'")))
    }

    fn feature(&self, name: &str) -> Result<usize> {
        self.features
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::format(format!("unknown feature '{name}'")))
    }

    /// Declares a feature ahead of its first assignment, fixing its index.
    pub fn declare_feature(&mut self, feature: &str) -> Result<&mut Self> {
        if self.feature(feature).is_ok() {
            return Err(Error::format(format!("feature '{feature}' declared twice")));
        }
        self.features.push(feature.to_string());
        Ok(self)
    }

    /// Puts `state` in feature `feature`, declaring the feature on first use.
    pub fn assign(&mut self, state: &str, feature: &str) -> Result<&mut Self> {
        let x = self.state(state)?;
        let z = match self.feature(feature) {
            Ok(z) => z,
            Err(_) => {
                self.features.push(feature.to_string());
                self.features.len() - 1
            }
        };
        if self.assignment[x].is_some() {
            return Err(Error::format(format!("state '{state}' assigned twice")));
        }
        self.assignment[x] = Some(z);
        Ok(self)
    }

    /// Declares a rewarded exit. Exit names share the namespace of states.
    pub fn exit(&mut self, name: &str, reward: f64) -> Result<&mut Self> {
        if self.states.iter().any(|s| s == name) || self.exits.iter().any(|e| e.name == name) {
            return Err(Error::format(format!("exit name '{name}' already in use")));
        }
        self.exits.push(Terminal {
            name: name.to_string(),
            reward,
        });
        Ok(self)
    }

    /// Adds probability `prob` of moving from `from` to `to` under `action`;
    /// `to` is a state or exit name.
    pub fn transition(&mut self, action: &str, from: &str, to: &str, prob: f64) -> Result<&mut Self> {
        let u = self.action(action)?;
        let x = self.state(from)?;
        let target = match self.state(to) {
            Ok(y) => Target::State(y),
            Err(_) => match self.exits.iter().position(|e| e.name == to) {
                Some(e) => Target::Exit(e),
                None => return Err(Error::format(format!("unknown state or exit '{to}'"))),
            },
        };
        self.transitions.push((u, x, target, prob));
        Ok(self)
    }

    /// Same transition for every action.
    pub fn always(&mut self, from: &str, to: &str, prob: f64) -> Result<&mut Self> {
        for a in self.actions.clone() {
            self.transition(&a, from, to, prob)?;
        }
        Ok(self)
    }

    pub fn start(&mut self, state: &str, prob: f64) -> Result<&mut Self> {
        let x = self.state(state)?;
        self.p0[x] += prob;
        Ok(self)
    }

    pub fn reward(&mut self, feature: &str, reward: f64) -> Result<&mut Self> {
        let z = self.feature(feature)?;
        self.rewards.insert(z, reward);
        Ok(self)
    }

    /// Adds a named option given as `(action, weight)` pairs.
    pub fn option(&mut self, name: &str, weights: &[(&str, f64)]) -> Result<&mut Self> {
        let mut w = vec![0.0; self.actions.len()];
        for (a, p) in weights {
            w[self.action(a)?] += p;
        }
        self.options.push((name.to_string(), w));
        Ok(self)
    }

    pub fn build(&self) -> Result<Environment> {
        let n = self.states.len();
        let assignment = self
            .assignment
            .iter()
            .enumerate()
            .map(|(x, z)| z.ok_or_else(|| Error::format(format!("state '{}' has no feature", self.states[x]))))
            .collect::<Result<Vec<_>>>()?;
        let features = FeatureMap::new(assignment, self.features.len())?;
        let n_actions = self.actions.len();
        let mut kernels = vec![DMatrix::zeros(n, n); n_actions];
        let mut exit_kernels = vec![DMatrix::zeros(self.exits.len(), n); n_actions];
        for &(u, x, target, p) in &self.transitions {
            match target {
                Target::State(y) => kernels[u][(y, x)] += p,
                Target::Exit(e) => exit_kernels[u][(e, x)] += p,
            }
        }
        let rewards = (0..self.features.len())
            .map(|z| self.rewards.get(&z).copied().unwrap_or(0.0))
            .collect();
        let options = if self.options.is_empty() {
            None
        } else {
            Some(
                self.options
                    .iter()
                    .map(|(name, w)| OptionDist::new(name.clone(), w.clone()))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        let mut env = Environment::with_exits(
            kernels,
            self.exits.clone(),
            exit_kernels,
            DVector::from_vec(self.p0.clone()),
            rewards,
            features,
            options,
        )?;
        if self.options.is_empty() {
            let named = self
                .actions
                .iter()
                .enumerate()
                .map(|(u, a)| OptionDist::deterministic(a.clone(), n_actions, u))
                .collect();
            env = env.with_options(named)?;
        }
        env.with_names(self.states.clone(), self.actions.clone(), self.features.clone())
    }
}
