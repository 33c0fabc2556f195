use std::path::PathBuf;

use thiserror::Error;
use xtray_core::audit::Fault;
use xtray_core::ServiceError;

/// Every failure the `xtray` binary reports, each with a stable class name
/// and exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error("audit chain fails verification at entry {index} ({fault:?})")]
    AuditInvalid { index: u64, fault: Fault },
    #[error(transparent)]
    Service(ServiceError),
    #[error("server error: {0}")]
    Server(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Io { .. } => "IoError",
            CliError::Input(_) => "InputError",
            CliError::AuditInvalid { .. } => "AuditInvalid",
            CliError::Service(_) => "ServiceError",
            CliError::Server(_) => "ServerError",
        }
    }

    /// 2 is left to clap for usage errors.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Input(_) => 5,
            CliError::AuditInvalid { .. } => 6,
            CliError::Service(_) => 7,
            CliError::Server(_) => 8,
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Config(m) => CliError::Config(m),
            ServiceError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Service(other),
        }
    }
}
