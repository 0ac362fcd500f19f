use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] graft::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for configuration problems, 3 for everything
    /// that goes wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse { .. } | Self::Invalid(_) => 2,
            Self::Model(graft::Error::Config(_)) => 2,
            _ => 3,
        }
    }

    /// Stable, machine-parsable prefix for the single-line CLI report.
    pub fn prefix(&self) -> &'static str {
        match self {
            Self::Parse { .. } | Self::Invalid(_) | Self::Model(graft::Error::Config(_)) => "config-error",
            Self::Corrupt(_) => "checkpoint-corrupt",
            Self::Incompatible(_) => "checkpoint-incompatible",
            Self::Diverged { .. } => "diverged",
            Self::Io { .. } => "io-error",
            Self::Model(_) => "runtime-error",
        }
    }

    /// `prefix: message` with newlines folded so it stays on one line.
    pub fn report_line(&self) -> String {
        format!("{}: {}", self.prefix(), self.to_string().replace('\n', " "))
    }
}
