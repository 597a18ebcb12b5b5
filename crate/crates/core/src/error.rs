use thiserror::Error;

/// Errors produced across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate deformation at X = ({:.6}, {:.6}): det F = {det_f:.3e}", .point[0], .point[1])]
    DegenerateDeformation { point: [f64; 2], det_f: f64 },

    #[error("solver failure: {reason} (condition estimate {condition:.3e})")]
    SolverFailure { reason: String, condition: f64 },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr = {lr:.3e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("inadmissible design: {0}")]
    InadmissibleDesign(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Toml(_) | Error::Format(_) => 2,
            Error::SolverFailure { .. } | Error::NonFiniteLoss { .. } => 3,
            Error::DegenerateDeformation { .. } | Error::InadmissibleDesign(_) => 4,
            Error::Io(_) | Error::Json(_) => 1,
        }
    }
}
