use kvlab_core::bench::BenchError;
use kvlab_core::compress::CompressError;
use kvlab_core::metrics::MetricError;
use kvlab_core::model::ModelError;
use kvlab_core::session::SessionError;
use kvlab_core::sparsify::SparsifyError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Validation,
    Runtime,
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Validation, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Runtime, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 3,
            ErrorKind::Runtime => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind,
            "message": self.message,
            "exit_code": self.exit_code(),
        })
        .to_string()
    }

    /// Prefixes the message with the file or step it concerns.
    pub fn context(mut self, what: impl std::fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => Self::validation(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        match e.classify() {
            serde_json::error::Category::Io => Self::runtime(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(io) => io.into(),
            ModelError::Json(j) => j.into(),
            ModelError::InvalidConfig(_)
            | ModelError::InvalidWeights(_)
            | ModelError::UnsupportedVersion(_)
            | ModelError::InvalidToken { .. }
            | ModelError::EmptyInput
            | ModelError::SequenceTooLong { .. } => Self::validation(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Io(io) => io.into(),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<CompressError> for CliError {
    fn from(e: CompressError) -> Self {
        match e {
            CompressError::InvalidConfig(_) => Self::validation(e.to_string()),
            CompressError::Model(m) => m.into(),
            _ => Self::runtime(e.to_string()),
        }
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Model(m) => m.into(),
            SessionError::Compress(c) => c.into(),
            SessionError::Metric(m) => m.into(),
            SessionError::NoTurns
            | SessionError::EmptyInput
            | SessionError::SequenceTooLong { .. }
            | SessionError::InvalidParams(_) => Self::validation(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Io(io) => io.into(),
            MetricError::Compress(c) => c.into(),
            MetricError::Csv(_) => Self::runtime(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<SparsifyError> for CliError {
    fn from(e: SparsifyError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<kvlab_core::tensor::TensorError> for CliError {
    fn from(e: kvlab_core::tensor::TensorError) -> Self {
        Self::validation(e.to_string())
    }
}
