use std::path::PathBuf;

use thiserror::Error;

use crate::norm::DomainId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unknown domain {requested}; registered domains: {registered:?}")]
    UnknownDomain { requested: DomainId, registered: Vec<DomainId> },

    #[error("domain {0} is already registered")]
    DuplicateDomain(DomainId),

    #[error("non-finite {what} in BN layer {layer}")]
    NonFinite { layer: usize, what: &'static str },

    #[error("invalid config at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("truncated input at byte offset {offset}: {context}")]
    Truncated { offset: usize, context: String },

    #[error("checksum mismatch in {section}")]
    Checksum { section: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("header: {0}")]
    Header(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parameter { name: name.into(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
