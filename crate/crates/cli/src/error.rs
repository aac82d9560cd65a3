use thiserror::Error;
use wastebench_core::fusion::FusionError;
use wastebench_core::manifest::ManifestError;
use wastebench_core::metrics::MetricsError;
use wastebench_core::pipeline::PipelineError;
use wastebench_core::predictions::PredictionError;
use wastebench_models::checkpoint::ArchiveError;
use wastebench_models::data::DataError;
use wastebench_models::trainer::{CheckpointError, TrainError};
use wastebench_models::ModelError;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

pub fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{context}: {e}"))
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Io { .. } => CliError::Io(e.to_string()),
            PipelineError::Manifest(m) => m.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<PredictionError> for CliError {
    fn from(e: PredictionError) -> Self {
        match e {
            PredictionError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Prediction(p) => p.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::DivergedTraining { .. } => CliError::Diverged(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Prediction(p) => p.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Archive(ArchiveError::Io { .. }) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}
