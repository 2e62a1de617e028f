use std::io;

use thiserror::Error;

use crate::wire::WireError;

/// Errors surfaced by the headnode, disk server, client library and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("authorization failed")]
    Auth,
    #[error("open queue full ({0} waiting)")]
    QueueOverflow(usize),
    #[error("stale handle {0}")]
    StaleHandle(u64),
    #[error("stale replica: {0}")]
    StaleReplica(String),
    #[error("offset {offset} out of range for file of {size} bytes")]
    Range { offset: u64, size: u64 },
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("connection closed")]
    Closed,
    #[error("remote error {code}: {detail}")]
    Remote { code: u16, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Numeric codes carried by `ErrorReply` frames.
pub mod code {
    pub const PROTOCOL: u16 = 1;
    pub const NOT_FOUND: u16 = 2;
    pub const AUTH: u16 = 3;
    pub const QUEUE_OVERFLOW: u16 = 4;
    pub const STALE_HANDLE: u16 = 5;
    pub const STALE_REPLICA: u16 = 6;
    pub const RANGE: u16 = 7;
    pub const ALREADY_EXISTS: u16 = 8;
    pub const INTERNAL: u16 = 99;
}

impl Error {
    /// Code used when this error is reported to a peer in an `ErrorReply`.
    pub fn wire_code(&self) -> u16 {
        match self {
            Error::Wire(_) | Error::Protocol(_) => code::PROTOCOL,
            Error::NotFound(_) => code::NOT_FOUND,
            Error::AlreadyExists(_) => code::ALREADY_EXISTS,
            Error::Auth => code::AUTH,
            Error::QueueOverflow(_) => code::QUEUE_OVERFLOW,
            Error::StaleHandle(_) => code::STALE_HANDLE,
            Error::StaleReplica(_) => code::STALE_REPLICA,
            Error::Range { .. } => code::RANGE,
            Error::Remote { code, .. } => *code,
            _ => code::INTERNAL,
        }
    }

    /// Rebuilds a typed error from an `ErrorReply` received off the wire.
    pub fn from_reply(code: u16, detail: String) -> Self {
        match code {
            code::NOT_FOUND => Error::NotFound(detail),
            code::AUTH => Error::Auth,
            code::QUEUE_OVERFLOW => Error::QueueOverflow(detail.parse().unwrap_or(0)),
            code::STALE_HANDLE => Error::StaleHandle(detail.parse().unwrap_or(0)),
            code::STALE_REPLICA => Error::StaleReplica(detail),
            code::ALREADY_EXISTS => Error::AlreadyExists(detail),
            code::PROTOCOL => Error::Protocol(detail),
            _ => Error::Remote { code, detail },
        }
    }

    /// Detail string paired with [`Error::wire_code`].
    pub fn wire_detail(&self) -> String {
        match self {
            Error::NotFound(p) | Error::StaleReplica(p) | Error::AlreadyExists(p) => p.clone(),
            Error::QueueOverflow(n) => n.to_string(),
            Error::StaleHandle(h) => h.to_string(),
            Error::Remote { detail, .. } => detail.clone(),
            other => other.to_string(),
        }
    }
}
