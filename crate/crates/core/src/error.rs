use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SpeftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SpeftError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced from finite inputs")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph was already consumed by a backward pass")]
    GraphConsumed,
    #[error("{0} does not support second-order differentiation")]
    UnsupportedSecondOrder(&'static str),
    #[error("hessian-vector product produced non-finite values (step size {eps:e})")]
    StepSizeFailure { eps: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("layer `{layer}`: rank {rank} exceeds min dimension {max}")]
    RankTooLarge {
        layer: String,
        rank: usize,
        max: usize,
    },
    #[error("density {0} outside (0, 1]")]
    InvalidDensity(f64),
    #[error("empty score set")]
    EmptyScores,
    #[error("non-finite salience score in layer `{layer}` at index {index}")]
    NonFiniteScore { layer: String, index: usize },
    #[error("budget rounds to zero: floor({rho} * {n}) = 0")]
    BudgetRoundsToZero { rho: f64, n: usize },
    #[error("metric {0} requires data")]
    DataRequired(String),
    #[error("unknown metric `{0}`; valid metrics: magnitude, gradient, snip, force, taylor_fo, synflow, grasp, fisher, random")]
    UnknownMetric(String),
    #[error("model has no linear-chain view")]
    NoLinearChain,
    #[error("mask layers do not match: {0}")]
    MismatchedLayers(String),
    #[error("non-finite gradient in layer `{layer}` at coordinate {index}")]
    NonFiniteGradient { layer: String, index: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("dataset error: {0}")]
    Data(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },
    #[error("adapter fingerprint {found} does not match base checkpoint {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Runtime,
    Io,
}

impl SpeftError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpeftError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        SpeftError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        use SpeftError::*;
        match self {
            Io { .. } | Format { .. } | FingerprintMismatch { .. } => ErrorClass::Io,
            NonFinite { .. }
            | StepSizeFailure { .. }
            | NonFiniteGradient { .. }
            | Divergence { .. } => ErrorClass::Runtime,
            _ => ErrorClass::Config,
        }
    }

    /// Exit code: 2 config error, 3 runtime divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Runtime => 3,
            ErrorClass::Io => 4,
        }
    }
}
