use std::path::PathBuf;

use crate::masking::LossVariant;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("split `{0}` has no records")]
    EmptySplit(&'static str),

    #[error("cannot pair from an empty {0} pool")]
    EmptyPool(&'static str),

    #[error("mask ratio {0} is outside [0, 1]")]
    InvalidRatio(f32),

    #[error("loss region `{0}` is empty for this patch mask")]
    EmptyLossRegion(LossVariant),

    #[error("non-finite value in {stage} (layer {layer:?})")]
    Numerical { stage: &'static str, layer: Option<usize> },

    #[error("configuration rejected: {0}")]
    ConfigRejected(String),

    #[error("checkpoint does not match configuration: {0}")]
    ConfigMismatch(String),

    #[error("evaluation needs at least one pair")]
    EmptyEvaluation,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { what, detail: detail.into() }
    }

    /// Stable variant name for structured error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDimension(_) => "InvalidDimension",
            Error::EmptySplit(_) => "EmptySplit",
            Error::EmptyPool(_) => "EmptyPool",
            Error::InvalidRatio(_) => "InvalidRatio",
            Error::EmptyLossRegion(_) => "EmptyLossRegion",
            Error::Numerical { .. } => "NumericalError",
            Error::ConfigRejected(_) => "ConfigRejected",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::EmptyEvaluation => "EmptyEvaluation",
            Error::Format { .. } => "FormatError",
            Error::Io { .. } => "IoError",
        }
    }

    /// True for errors caused by a degenerate (mask ratio, loss region) choice.
    pub fn is_degenerate_config(&self) -> bool {
        matches!(self, Error::ConfigRejected(_) | Error::EmptyLossRegion(_))
    }
}
