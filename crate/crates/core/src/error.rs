use thiserror::Error;

use crate::attestation::RejectReason;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("crypto error: {0}")]
    Crypto(String),

    #[error("attestation rejected: {0}")]
    Rejected(RejectReason),

    #[error("round {round_id} aborted: {reason}")]
    Aborted { round_id: u64, reason: String },

    #[error("timed out: {0}")]
    Timeout(String),

    #[error("connection closed")]
    Closed,

    /// A peer hung up or its link failed mid-session.
    #[error("peer lost: {0}")]
    PeerLost(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Failures that usually follow another node's failure rather than
    /// cause it.
    pub fn is_knock_on(&self) -> bool {
        use std::io::ErrorKind::*;
        match self {
            Error::Closed | Error::PeerLost(_) => true,
            Error::Io(e) => matches!(e.kind(), BrokenPipe | ConnectionReset | ConnectionAborted | UnexpectedEof),
            _ => false,
        }
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
