//! Crate-wide error type and result alias.
//!
//! Hot numeric paths (matrix products, layer forward/backward) treat shape
//! mismatches as programmer error and panic via `assert!`; everything that can
//! fail because of user input or runtime state returns [`Error`].

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("index {index} out of range for {context} of size {size}")]
    Bounds {
        context: &'static str,
        index: usize,
        size: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid state: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("KL divergence undefined: class {class} has zero mass in q but {p_mass} in p")]
    KlSupport { class: usize, p_mass: f64 },

    #[error("KL target {kappa} unreachable after {retries} proposals (best path max {best_max})")]
    UnreachableTarget {
        kappa: f64,
        retries: usize,
        best_max: f64,
    },

    #[error(
        "target pool cannot satisfy the requested split: class {class} has {available} \
         instances but needs {needed}"
    )]
    InsufficientPool {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("missing argument for code policy {policy}: {missing}")]
    Policy {
        policy: &'static str,
        missing: &'static str,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Stable process exit code contract: 0 success, 1 config, 2 data, 3 runtime/numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 1,
            Error::Parse { .. }
            | Error::Io(_)
            | Error::EmptyInput(_)
            | Error::InsufficientPool { .. }
            | Error::UnreachableTarget { .. }
            | Error::Checkpoint(_) => 2,
            _ => 3,
        }
    }
}
