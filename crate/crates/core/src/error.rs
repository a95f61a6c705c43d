use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed something that violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Malformed or inconsistent dataset contents.
    #[error("data error: {0}")]
    Data(String),

    /// The behavior distribution assigns zero mass where the target does not.
    #[error("support violation at states {states:?}")]
    Support { states: Vec<usize> },

    #[error("divergence in {loss} at step {step}: value {value:.6e} exceeds limit {limit:.6e}")]
    Divergence {
        loss: String,
        step: usize,
        value: f64,
        limit: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config(_) => 2,
            Error::Degenerate(_)
            | Error::Data(_)
            | Error::Support { .. }
            | Error::Io(_)
            | Error::Json(_) => 3,
            Error::Divergence { .. } => 4,
            Error::Numerical(_) => 1,
        }
    }
}
