use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("rollout diverged after index {last_valid}")]
    Diverged { last_valid: usize },

    #[error("trajectory too short: need at least {need} samples, got {got}")]
    TooShort { need: usize, got: usize },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unknown system: {0}")]
    UnknownSystem(String),

    #[error("simulation diverged for task {task} after {retries} retries")]
    SimulationDiverged { task: usize, retries: usize },

    #[error("library is already composed")]
    AlreadyComposed,

    #[error("configuration failed: {0}")]
    FailedConfig(String),

    #[error("every configuration in the sweep failed")]
    AllConfigsFailed,

    #[error("ground truth has zero variance")]
    ZeroVariance,

    #[error("singular system in least-squares fit")]
    SingularFit,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
