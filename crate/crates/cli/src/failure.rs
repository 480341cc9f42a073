use std::path::{Path, PathBuf};

use serde::Serialize;

/// A failed command, reported on stderr as one JSON object.
#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip)]
    pub exit_code: i32,
}

impl Failure {
    /// Bad flags or configuration.
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            error: "usage",
            message: message.into(),
            path: None,
            exit_code: 2,
        }
    }

    /// Unreadable or malformed input.
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            error: "input",
            message: message.into(),
            path: None,
            exit_code: 2,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            error: "io",
            message: format!("{}: {e}", path.display()),
            path: Some(path.to_path_buf()),
            exit_code: 2,
        }
    }

    pub fn with_path(mut self, path: &Path) -> Self {
        self.path = Some(path.to_path_buf());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("failure serializes")
    }
}

impl From<convexnet::Error> for Failure {
    fn from(e: convexnet::Error) -> Self {
        use convexnet::Error as E;
        let message = e.to_string();
        let (error, path, exit_code) = match &e {
            E::Io { path, .. } => ("io", Some(path.clone()), 2),
            E::Parse { path, .. } => ("parse", Some(path.clone()), 2),
            E::EmptyFile(path) => ("empty_file", Some(path.clone()), 2),
            E::Shape(_) => ("shape", None, 2),
            E::InvalidArgument(_) => ("invalid_argument", None, 2),
            E::EnumerationTooLarge { .. } => ("enumeration_too_large", None, 2),
            E::BoundAssumption { .. } => ("bound_assumption", None, 2),
            E::Diverged { .. } => ("diverged", None, 1),
            E::SgdDiverged { .. } => ("sgd_diverged", None, 1),
            E::Json(_) => ("json", None, 2),
        };
        Self {
            error,
            message,
            path,
            exit_code,
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::input(e.to_string())
    }
}
