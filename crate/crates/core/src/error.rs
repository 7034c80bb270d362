use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("policy enumeration needs {needed} policies, cap is {cap}")]
    EnumerationCapExceeded { needed: f64, cap: u64 },

    #[error("linear system is singular: {0}")]
    Singular(String),

    #[error("value iteration did not converge after {iterations} sweeps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("environment is not quasi-Markov: feature {feature} has entrance dimension {dim}")]
    NotQuasiMarkov { feature: usize, dim: usize },

    #[error("properness violated: spectral radius {radius} for feature {feature}, option {option}")]
    PropernessViolation {
        feature: usize,
        option: usize,
        radius: f64,
    },

    #[error("behavior policy lacks full support at feature {feature}, option {option}")]
    NoFullSupport { feature: usize, option: usize },

    #[error("conditioning on a zero-mass event: {0}")]
    ZeroMass(String),

    #[error("cannot step from a terminal state")]
    TerminalState,

    #[error("environment file error{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Format { line: Option<usize>, message: String },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),
}

impl Error {
    pub(crate) fn format(message: impl Into<String>) -> Self {
        Error::Format {
            line: None,
            message: message.into(),
        }
    }
}
