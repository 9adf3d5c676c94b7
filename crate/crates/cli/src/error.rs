use std::path::Path;

use loopsampler::Error;
use serde::Serialize;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_TRUNCATION: u8 = 3;
pub const EXIT_DEGENERATE: u8 = 4;
pub const EXIT_RECONSTRUCTION: u8 = 5;

/// Failure reported on stderr as `{"error": {...}}` with a fixed exit code.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, kind: "config", message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: EXIT_FAILURE, kind: "io", message: format!("{}: {e}", path.display()) }
    }

    /// Errors raised while reconstructing; degenerate inputs keep their own code.
    pub fn reconstruction(e: Error) -> Self {
        match e {
            Error::SpectralRadius { .. } | Error::NonUniqueStationary { .. } | Error::TruncationOverflow { .. } => {
                e.into()
            }
            other => Self { code: EXIT_RECONSTRUCTION, kind: "reconstruction", message: other.to_string() },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) | Error::Io(_) | Error::Json(_) => (EXIT_CONFIG, "config"),
            Error::TruncationOverflow { .. } | Error::TooLarge(_) => (EXIT_TRUNCATION, "truncation"),
            Error::NonUniqueStationary { .. } | Error::SpectralRadius { .. } => (EXIT_DEGENERATE, "degenerate"),
            Error::MissingMoment { .. } => (EXIT_RECONSTRUCTION, "reconstruction"),
            _ => (EXIT_FAILURE, "internal"),
        };
        Self { code, kind, message: e.to_string() }
    }
}
