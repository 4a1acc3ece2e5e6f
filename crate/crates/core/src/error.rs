use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("simplex needs at least 2 pre-allocated classes, got {0}")]
    SimplexTooSmall(usize),

    #[error(
        "prototype capacity exhausted assigning label {label:?}: pretrain cursor at {pretrain_cursor}, finetune cursor at {finetune_cursor}"
    )]
    CapacityExhausted {
        label: String,
        pretrain_cursor: usize,
        finetune_cursor: usize,
    },

    #[error("label {label:?} already assigned to prototype {index} in the {phase} phase")]
    PhaseConflict {
        label: String,
        index: usize,
        phase: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("prototype index {0} has no class assigned")]
    UnassignedLabel(usize),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("task {task}: {source}")]
    AtTask {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics themselves (divergence), as opposed
    /// to rejected inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Diverged { .. } => true,
            Error::AtTask { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub fn at_task(self, task: usize) -> Self {
        Error::AtTask {
            task,
            source: Box::new(self),
        }
    }
}
