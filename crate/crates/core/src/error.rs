use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unknown prompt id {0}")]
    UnknownPrompt(usize),
    #[error("non-finite {what} in stage {stage} at iteration {iteration}")]
    NonFinite {
        stage: &'static str,
        what: &'static str,
        iteration: usize,
    },
    #[error("reward collapse in stage {stage}: mean reward stayed below half its peak for {window} iterations (iteration {iteration})")]
    RewardCollapse {
        stage: &'static str,
        iteration: usize,
        window: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("requires stage: {0}")]
    MissingStage(&'static str),
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
