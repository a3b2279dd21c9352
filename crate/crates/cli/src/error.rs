use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    /// Malformed input table.
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{stage}: {source}")]
    Core {
        stage: String,
        #[source]
        source: ci_stonet_core::Error,
    },
}

pub type CliResult<T> = Result<T, CliError>;

/// Machine-readable form of an error, printed as one JSON line on stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    pub stage: Option<String>,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.into(), message: err.to_string() }
    }

    pub fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Schema { path: path.into(), message: message.into() }
    }

    pub fn core(stage: impl Into<String>) -> impl FnOnce(ci_stonet_core::Error) -> Self {
        let stage = stage.into();
        move |source| CliError::Core { stage, source }
    }

    /// 2 for anything the user can fix in the inputs, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core {
                source: ci_stonet_core::Error::Numeric(_) | ci_stonet_core::Error::DegenerateFit(_),
                ..
            } => 3,
            _ => 2,
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let (kind, stage) = match self {
            CliError::Config(_) => ("config", None),
            CliError::Io { .. } => ("io", None),
            CliError::Schema { .. } => ("schema", None),
            CliError::Checkpoint { .. } => ("checkpoint", None),
            CliError::Core { stage, source } => {
                let kind = match source {
                    ci_stonet_core::Error::Config(_) => "config",
                    ci_stonet_core::Error::Dimension(_) => "dimension",
                    ci_stonet_core::Error::Numeric(_) => "numeric",
                    ci_stonet_core::Error::DegenerateFit(_) => "degenerate_fit",
                };
                (kind, Some(stage.clone()))
            }
        };
        ErrorRecord { kind, stage, message: self.to_string(), exit_code: self.exit_code() }
    }
}
