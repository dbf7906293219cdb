use std::path::Path;

use clinical_mtl::codec::CodecError;
use clinical_mtl::corpus::CorpusError;
use clinical_mtl::eval::EvalError;
use clinical_mtl::model::ModelError;
use clinical_mtl::tensor::TensorError;
use clinical_mtl::train::TrainError;
use thiserror::Error;

/// Process exit codes. Argument errors exit with 2 (clap's own).
pub mod exit {
    pub const IO: i32 = 1;
    pub const CONFIG: i32 = 3;
    pub const DATA: i32 = 4;
    pub const NUMERIC: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Numeric(_) => exit::NUMERIC,
            CliError::Io(_) => exit::IO,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::TooLong { .. } | ModelError::UnknownId { .. } => {
                CliError::Data(e.to_string())
            }
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::NonFiniteLoss { .. } => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Config(_)
            | TrainError::Checkpoint(_)
            | TrainError::Tensor(TensorError::Checkpoint(_)) => CliError::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Eval(m) => m.into(),
            TrainError::Tensor(_) | TrainError::Io { .. } => CliError::Io(e.to_string()),
        }
    }
}
