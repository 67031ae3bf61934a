use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by loaders, generators and the simulator.
///
/// Constraint violations on a configuration are not errors; see
/// [`crate::config::validate_config`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Syntax or schema error while reading a file. `field` is the dotted path
    /// of the offending key when known.
    #[error("{}: {}{message}", path.display(), if field.is_empty() { String::new() } else { format!("{field}: ") })]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },

    /// A value parsed but breaks an invariant of its type.
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    #[error("calibration profile has no {quantity} entry for cut-point {cutpoint} at {axis}={value}")]
    MissingGridPoint {
        quantity: &'static str,
        cutpoint: usize,
        axis: &'static str,
        value: u32,
    },

    #[error("schedule does not match configuration: {0}")]
    ScheduleMismatch(String),

    #[error("no feasible configuration: {0}")]
    NoFeasibleConfig(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors that describe an unsatisfiable request rather than bad
    /// input.
    pub fn is_infeasibility(&self) -> bool {
        matches!(self, Error::NoFeasibleConfig(_) | Error::Infeasible(_))
    }
}
