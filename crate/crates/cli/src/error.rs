// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exit codes and the JSON error record written to stderr.

use serde::Serialize;

use ocrhead_core::records::RecordError;
use ocrhead_core::trace::TraceError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

/// Raised when the toolkit detects a broken internal invariant.
#[derive(Debug, thiserror::Error)]
#[error("internal invariant violated: {0}")]
pub struct InternalError(pub String);

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: String,
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub causes: Vec<String>,
}

/// Maps an error chain onto an exit code and a machine-readable record.
pub fn classify(err: &anyhow::Error) -> ErrorRecord {
    let mut kind = "validation";
    let mut code = EXIT_VALIDATION;
    let mut name = "ValidationError";
    let mut path = None;
    for cause in err.chain() {
        if cause.downcast_ref::<InternalError>().is_some() {
            (kind, code, name) = ("internal", EXIT_INTERNAL, "InternalInvariant");
            break;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            (kind, code, name) = ("io", EXIT_IO, "IoError");
            break;
        }
        if let Some(t) = cause.downcast_ref::<TraceError>() {
            match t {
                TraceError::SchemaViolation { path: p, .. } => {
                    name = "SchemaViolation";
                    path = Some(p.clone());
                }
                TraceError::VersionMismatch { .. } => name = "VersionMismatch",
                TraceError::Io(_) => {
                    (kind, code, name) = ("io", EXIT_IO, "IoError");
                }
                _ => name = "TraceError",
            }
            break;
        }
        if let Some(r) = cause.downcast_ref::<RecordError>() {
            match r {
                RecordError::Io(_) => (kind, code, name) = ("io", EXIT_IO, "IoError"),
                RecordError::Invalid { line, .. } => {
                    name = "SchemaViolation";
                    path = Some(format!("line {line}"));
                }
                RecordError::VersionMismatch { .. } => name = "VersionMismatch",
            }
            break;
        }
    }
    ErrorRecord {
        error: name.to_string(),
        kind,
        exit_code: code,
        message: err.to_string(),
        path,
        causes: err.chain().skip(1).map(|c| c.to_string()).collect(),
    }
}
