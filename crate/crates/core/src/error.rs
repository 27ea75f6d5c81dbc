use std::path::PathBuf;

use thiserror::Error;

/// A single unparseable CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    /// 1-based line number in the source file (header is line 1).
    pub line: u64,
    pub message: String,
}

impl std::fmt::Display for RowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: required column `{column}` not found")]
    MissingColumn { column: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{} unparseable row(s) in {}: {}", .rows.len(), .path.display(), summarize_rows(.rows))]
    Parse { path: PathBuf, rows: Vec<RowError> },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", .path.display())]
    Format { path: PathBuf, message: String },
}

fn summarize_rows(rows: &[RowError]) -> String {
    let shown: Vec<String> = rows.iter().take(5).map(|r| r.to_string()).collect();
    let mut s = shown.join("; ");
    if rows.len() > 5 {
        s.push_str(&format!("; ... and {} more", rows.len() - 5));
    }
    s
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for failures caused by the input data rather than the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn { .. }
                | Error::Schema(_)
                | Error::Parse { .. }
                | Error::InsufficientData(_)
                | Error::Io { .. }
                | Error::Format { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
