use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::fsutil::write_atomic;

pub const TRANSCRIPT_FORMAT_VERSION: u32 = 1;

/// Decoding parameters sent with (or used for) a generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestParams {
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for RequestParams {
    fn default() -> Self {
        Self {
            max_tokens: 8192,
            temperature: 0.0,
        }
    }
}

/// One prompt and its completion. Credentials are never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub format_version: u32,
    /// Endpoint URL, or `local`.
    pub endpoint: String,
    pub model: String,
    /// Cache policy descriptor, e.g. `sink:4,60`.
    pub policy: String,
    pub params: RequestParams,
    pub prompt: String,
    pub completion: String,
    /// RFC 3339.
    pub started_at: String,
    pub finished_at: String,
    /// HTTP attempts made, 1 when the first succeeded. 0 for local runs.
    #[serde(default)]
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Transcript {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transcript serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    /// Parses transcript JSON; errors carry the byte offset of the problem.
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let corrupt = |offset, message: String| HarnessError::CorruptTranscript {
            path: path.to_path_buf(),
            offset,
            message,
        };
        let t: Transcript = serde_json::from_str(text)
            .map_err(|e| corrupt(byte_offset(text, e.line(), e.column()), e.to_string()))?;
        if t.format_version != TRANSCRIPT_FORMAT_VERSION {
            return Err(corrupt(
                0,
                format!("unsupported format_version {}", t.format_version),
            ));
        }
        Ok(t)
    }
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column).min(text.len())
}

/// Loads a stored transcript. No network.
pub fn replay(path: &Path) -> Result<Transcript> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Transcript::parse(path, &text)
}
