use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not valid UTF-8")]
    Utf8 { path: PathBuf },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("treebank line {line}: {message}")]
    Treebank { line: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] prpn_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Utf8 { .. } => "utf8",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Treebank { .. } => "treebank",
            Error::Checkpoint(_) => "checkpoint",
            Error::Json(_) => "json",
            Error::Model(prpn_core::Error::Config(_)) => "config",
            Error::Model(_) => "model",
        }
    }

    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.kind() == "config" {
            2
        } else {
            1
        }
    }

    /// Single-line JSON report for standard error.
    pub fn to_json_line(&self) -> String {
        json!({"error": self.kind(), "message": self.to_string()}).to_string()
    }
}
