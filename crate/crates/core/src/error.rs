use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("label must be 0 or 1, got {0}")]
    Label(f64),
    #[error("sequence error: {0}")]
    Sequence(String),
    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("sequence of length {len} exceeds context length {max}")]
    Context { len: usize, max: usize },
    #[error("gradient check: {0}")]
    Gradcheck(String),
    #[error("LoRA merge: {0}")]
    Merge(String),
    #[error("prompt error: {0}")]
    Prompt(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint {field}: {message}")]
    Checkpoint { field: String, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("training aborted at batch {batch} (lr {lr:e}): {message}")]
    TrainingAbort {
        batch: usize,
        lr: f64,
        message: String,
    },
    #[error("orchestration error: {0}")]
    Orchestration(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn checkpoint(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
