//! Drives generation against a remote endpoint or the local model, stores
//! transcripts, and aggregates scores and lint counts into reports.

mod client;
mod extract;
mod report;
mod transcript;

use std::path::PathBuf;

use thiserror::Error;

pub use client::{run_remote, EndpointConfig, RetryPolicy, API_KEY_ENV, ENDPOINT_ENV};
pub use extract::{extract_code, Extracted};
pub use report::{
    evaluate, report_aggregate, EvalInput, ExperimentReport, ReportRow, CSV_COLUMNS, REPORT_FORMAT_VERSION,
};
pub use transcript::{replay, RequestParams, Transcript, TRANSCRIPT_FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("network failure after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("I/O on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: corrupt transcript at byte {offset}: {message}", path.display())]
    CorruptTranscript {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("report needs at least one row")]
    EmptyReport,
    #[error(transparent)]
    Score(#[from] crate::score::ScoreError),
}

impl HarnessError {
    /// True for failures of the outside world rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            HarnessError::Network { .. } | HarnessError::Status { .. } | HarnessError::MalformedResponse(_) | HarnessError::Io { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Current UTC time, RFC 3339.
pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339()
}

pub type Result<T> = std::result::Result<T, HarnessError>;
