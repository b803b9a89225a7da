use thiserror::Error;

use crate::model::{ClientId, NodeId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid fault rule: {0}")]
    Rule(String),

    #[error("message rejected: {0}")]
    InvalidMessage(String),

    #[error("client {0} already has an outstanding request")]
    OutstandingRequest(ClientId),

    #[error("node {node} is not the speaker for h={height} v={view}")]
    NotSpeaker { node: NodeId, height: u64, view: u64 },

    #[error("invalid adversary plan: {0}")]
    Plan(String),

    #[error("{line}:{column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
