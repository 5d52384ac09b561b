//! Serving side of echoless: response indexes, a registry of trained
//! models, the JSON ranking API and the command line.

use std::path::PathBuf;

use echoless::checkpoint::CheckpointError;
use echoless::encoder::EncoderError;
use echoless::text::TextError;
use thiserror::Error;

pub mod cli;
pub mod http;
pub mod index;
pub mod registry;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("{0}")]
    InvalidRequest(String),
    #[error("response pool is empty")]
    EmptyPool,
    #[error("config: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot bind {0}: {1}")]
    Bind(String, #[source] std::io::Error),
    #[error("internal: {0}")]
    Internal(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Text(#[from] TextError),
}
