use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed latent block: {0}")]
    MalformedLatentBlock(String),
    #[error("latent token {token} not allowed in surrounding text")]
    IllegalTokenInText { token: String },
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("token table: {0}")]
    Vocab(String),

    #[error("infeasible generation config: {0}")]
    InfeasibleConfig(String),
    #[error("question kind {kind} unsupported for scene: {reason}")]
    UnsupportedKindForScene { kind: String, reason: String },
    #[error("corrupt record at line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
    #[error("view {0} is not among the rendered views of this scene")]
    ViewSceneMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("rollout group of {0} is too small; need at least 2")]
    GroupTooSmall(usize),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite objective at step {step}")]
    NonFiniteObjective { step: u64 },
    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),
    #[error("ground truth must be positive, got {0}")]
    NonPositiveTruth(f64),

    #[error("config hash mismatch: checkpoint {found}, current {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("checkpoint {path} lacks component {component}")]
    MissingComponent { path: PathBuf, component: String },
    #[error("unknown ablation axis {0:?}")]
    UnknownAxis(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 data error, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } | Error::NonFiniteObjective { .. } => 3,
            Error::UnknownAxis(_) | Error::Config(_) => 1,
            _ => 2,
        }
    }
}
