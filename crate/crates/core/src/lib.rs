//! Tabular reinforcement learning under hard state aggregation.
//!
//! The crate covers finite episodic environments whose states are observed
//! only through a feature map, and the machinery around Committed Q-learning
//! on such environments: exact dynamic programming, entrance spaces and
//! aggregate MDPs, the stationary chain of the committed behavior, rewirings
//! and robustness checks, the learning algorithms themselves, and value and
//! Bellman risk metrics.

pub mod builder;
pub mod chain;
pub mod dp;
pub mod env;
pub mod error;
pub mod format;
pub mod learn;
pub mod linalg;
pub mod quasi;
pub mod random;
pub mod rewire;
pub mod risk;
pub mod rng;
pub mod zoo;

pub use builder::EnvBuilder;
pub use env::{
    BehaviorPolicy, Environment, FeatureMap, Next, OptionDist, ReactivePolicy, Terminal,
};
pub use error::{Error, Result};
