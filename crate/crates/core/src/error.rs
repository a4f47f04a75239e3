use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("invalid protocol: {0}")]
    Validation(String),
    #[error("degenerate anchors: {0}")]
    DegenerateAnchors(&'static str),
    #[error("missing landmark '{0}'")]
    MissingLandmark(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm vector for '{0}'")]
    ZeroVector(String),
    #[error("missing {kind} for id '{id}'")]
    MissingId { kind: &'static str, id: String },
    #[error("unexpected embedding '{0}' for model enrollment")]
    UnexpectedId(String),
    #[error("empty {0} set")]
    EmptyClass(&'static str),
    #[error("group '{0}' has no probes")]
    NoProbes(String),
    #[error("policy mismatch: {0}")]
    PolicyMismatch(String),
    #[error("extractor failure: {0}")]
    Extractor(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    /// Short stable tag for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::DegenerateAnchors(_) => "degenerate-anchors",
            Error::MissingLandmark(_) => "missing-landmark",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::ZeroVector(_) => "zero-vector",
            Error::MissingId { .. } => "missing-id",
            Error::UnexpectedId(_) => "unexpected-id",
            Error::EmptyClass(_) => "empty-class",
            Error::NoProbes(_) => "no-probes",
            Error::PolicyMismatch(_) => "policy-mismatch",
            Error::Extractor(_) => "extractor",
            Error::Config(_) => "config",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
