use jetred::model::ModelError;
use jetred::oracle::OracleError;
use jetred::reconstruct::ReconstructError;
use jetred::reduction::ReductionError;
use jetred::sim::SimError;
use thiserror::Error;

/// Exit codes: 1 output I/O, 2 model, 3 mathematics, 4 runtime.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Reduction(ReductionError),
    #[error("{0}")]
    Math(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Read { .. } | CliError::Model(_) | CliError::InvalidInput(_) => 2,
            CliError::Reduction(ReductionError::Model(_)) => 2,
            CliError::Reduction(_) | CliError::Math(_) => 3,
            CliError::Runtime(_) => 4,
            CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => 1,
        }
    }
}

impl From<ReductionError> for CliError {
    fn from(e: ReductionError) -> Self {
        CliError::Reduction(e)
    }
}

impl From<ReconstructError> for CliError {
    fn from(e: ReconstructError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::BadGrid => CliError::InvalidInput(e.to_string()),
            _ => CliError::InvalidInput(format!("correlation: {e}")),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Reduction(r) => CliError::Reduction(r),
            OracleError::Unsupported(s) => CliError::InvalidInput(s),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
