use thiserror::Error;

use crate::federation::ClientId;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied arguments that violate an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Experiment or protocol parameters that cannot be satisfied jointly.
    #[error("configuration error: {0}")]
    Config(String),

    /// A message (report, plan entry) that does not conform to the protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed binary input.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("client {client}: {source}")]
    Client {
        client: ClientId,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
