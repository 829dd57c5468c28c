use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was violated (shape, range, bounds).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The API was used out of order, e.g. backward on an empty tape.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("unknown prompt '{prompt}'; known prompts: {}", known.join(", "))]
    UnknownPrompt { prompt: String, known: Vec<String> },

    #[error("wrong teacher kind: {0}")]
    WrongTeacher(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("empty selection: project masks from more views before exporting")]
    EmptySelection,

    #[error("empty surface: no density above the iso-level {0}")]
    EmptySurface(f32),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("mesh format: {0}")]
    MeshFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
