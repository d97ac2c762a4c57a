use std::path::PathBuf;

use crate::checkpoint::Checkpoint;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] mcld_core::Error),
    #[error(transparent)]
    Data(#[from] mcld_synthdata::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("diffusion training needs a stage-1 checkpoint: {0}")]
    MissingStage1(String),
    #[error("non-finite {stage} loss at step {step}")]
    NonFiniteLoss {
        stage: &'static str,
        step: usize,
        last_good: Box<Checkpoint>,
    },
}

impl Error {
    /// Stable identifier used in the command-line error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Model(e) => match e {
                mcld_core::Error::ShapeMismatch { .. } => "ShapeMismatch",
                mcld_core::Error::NonFiniteLoss { .. } => "NonFiniteLoss",
                mcld_core::Error::EmptyRegion => "EmptyRegion",
                mcld_core::Error::BadSchedule(_) => "BadSchedule",
                mcld_core::Error::InsufficientRuns(_) => "InsufficientRuns",
                mcld_core::Error::InvalidConfig(_) => "InvalidConfig",
                mcld_core::Error::MissingParameter(_) => "MissingParameter",
            },
            Error::Data(e) => match e {
                mcld_synthdata::Error::InvalidSpec(_) => "InvalidSpec",
                mcld_synthdata::Error::PlacementFailure { .. } => "PlacementFailure",
                mcld_synthdata::Error::PathFailure { .. } => "PathFailure",
                mcld_synthdata::Error::IoFailure { .. } => "IoFailure",
                mcld_synthdata::Error::SchemaViolation { .. } => "SchemaViolation",
            },
            Error::Io { .. } => "IoFailure",
            Error::Config(_) => "InvalidConfig",
            Error::BadCheckpoint(_) => "BadCheckpoint",
            Error::MissingStage1(_) => "MissingStage1",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
