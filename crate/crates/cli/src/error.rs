use std::path::Path;

use serde::Serialize;

/// A command failure with its exit code, reported on stderr as JSON.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: String) -> Self {
        Failure { kind: "config", exit_code: 2, message }
    }

    pub fn data(message: String) -> Self {
        Failure { kind: "data", exit_code: 3, message }
    }

    /// Unreadable input. A missing path is a configuration error.
    pub fn input(path: &Path, e: std::io::Error) -> Self {
        let message = format!("cannot read {}: {e}", path.display());
        if crate::config::is_not_found(&e) {
            Failure::config(message)
        } else {
            Failure { kind: "io", exit_code: 1, message }
        }
    }

    pub fn output(path: &Path, e: std::io::Error) -> Self {
        Failure {
            kind: "io",
            exit_code: 1,
            message: format!("cannot write {}: {e}", path.display()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<scenario_core::Error> for Failure {
    fn from(e: scenario_core::Error) -> Self {
        use scenario_core::Error as E;
        match &e {
            E::Config(_) | E::Dimension(_) => Failure::config(e.to_string()),
            E::Io { source, .. } if crate::config::is_not_found(source) => Failure::config(e.to_string()),
            E::Io { .. } => Failure { kind: "io", exit_code: 1, message: e.to_string() },
            _ => Failure::data(e.to_string()),
        }
    }
}
