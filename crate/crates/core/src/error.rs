use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("action ({a1}, {a2}) lies outside the action box [{lo}, {hi}]")]
    Domain { a1: f64, a2: f64, lo: f64, hi: f64 },

    #[error("cannot enumerate {0} agents: limit is {max}", max = crate::games::MAX_ENUMERATED_AGENTS)]
    EnumerationLimit(usize),

    #[error("invalid policy pair: {0}")]
    InvalidPair(&'static str),

    #[error("operation not supported for {0} policies")]
    UnsupportedFamily(&'static str),

    #[error("operation not supported for the {0} environment")]
    UnsupportedEnvironment(&'static str),

    #[error("agent index {index} out of range for {n_agents} agents")]
    Index { index: usize, n_agents: usize },

    #[error("batch size must be at least 1")]
    InvalidBatch,

    #[error("insufficient data: {0}")]
    InsufficientData(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("allocation over an empty set of agents")]
    EmptySystem,

    #[error("lagrange multiplier must be positive, got {0}")]
    InvalidMultiplier(f64),

    #[error("no agent has positive utility")]
    NoPositiveUtility,

    #[error("lambda solver did not converge after {iterations} iterations (total {achieved}, target {target})")]
    SolverFailure {
        iterations: usize,
        achieved: f64,
        target: f64,
    },

    #[error("history is empty")]
    EmptyHistory,

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("export failed for {path}: {source}")]
    Export {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed run file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn config(line: usize, message: impl Into<String>) -> Self {
        Error::Config {
            line,
            message: message.into(),
        }
    }
}
