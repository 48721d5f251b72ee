use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("set {set_id}: {msg}")]
    Structure { set_id: String, msg: String },
    #[error("split with r={r} over {n} sets leaves an empty side")]
    DegenerateSplit { r: f64, n: usize },
    #[error("outcome {0} has no usable observations")]
    EmptyOutcome(String),
    #[error("score spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("exact tails need equal scores (sign or mcnemar)")]
    UnsupportedExact,
    #[error("bootstrap: {0}")]
    Bootstrap(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("no pairs formed within caliper {caliper:.4}")]
    NoMatches { caliper: f64 },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by the input data rather than by flags or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::Structure { .. }
                | Error::EmptyOutcome(_)
                | Error::SpecMismatch(_)
                | Error::DegenerateSplit { .. }
        )
    }
}
