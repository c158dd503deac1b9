use thiserror::Error;

use crate::codec::CodecError;
use crate::paillier::PaillierError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame of {len} bytes exceeds the {max}-byte cap")]
    FrameTooLarge { len: usize, max: usize },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("unexpected message type 0x{got:02x} (expected 0x{expected:02x})")]
    UnexpectedMessage { expected: u8, got: u8 },
    #[error("peer reported an error: {0}")]
    Remote(String),
    #[error("value bound exceeded: {0}")]
    BoundExceeded(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index format: {0}")]
    Format(String),
    #[error("result shares disagree: {0}")]
    ShareMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
