use std::path::PathBuf;

/// Errors raised anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum RavrError {
    /// The path space |reason|^L * |answer|^m exceeds the enumerability bound.
    #[error("size bound exceeded: {0}")]
    SizeBound(String),

    #[error("infeasible golden-path plan: {0}")]
    Infeasible(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("unknown context: {0}")]
    UnknownContext(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("invalid answer: {0}")]
    InvalidAnswer(String),

    /// Expected utility is too small for the posterior to be defined.
    #[error("degenerate mu: {0:e} is below 1e-12")]
    DegenerateMu(f64),

    #[error("empty reward group")]
    EmptyGroup,

    #[error("group has no rewards yet")]
    UnscoredGroup,

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("configs do not share tasks: {0}")]
    MismatchedTasks(String),

    #[error("unknown column '{0}'")]
    UnknownColumn(String),

    #[error("instance {instance}: {source}")]
    Instance {
        instance: usize,
        #[source]
        source: Box<RavrError>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RavrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RavrError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, RavrError>;
