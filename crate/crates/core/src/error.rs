use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("cross_entropy: every position is ignored, mean loss undefined")]
    AllIgnored,
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("corpus {path:?}: {reason}")]
    Corpus { path: PathBuf, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint {path:?}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("schedule: step {step} exceeds total steps {total}")]
    StepPastSchedule { step: u64, total: u64 },
    #[error("optimizer: non-finite gradient in parameter {name:?} at step {step}")]
    NonFiniteGradient { name: String, step: u64 },
    #[error("training: {0}")]
    Train(String),
    #[error("task {task}: {reason}")]
    Task { task: String, reason: String },
    #[error("metric: {0}")]
    Metric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn corpus(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corpus {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn task(task: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Task {
            task: task.into(),
            reason: reason.into(),
        }
    }
}
