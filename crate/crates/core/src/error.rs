use thiserror::Error;

use crate::alloc::AllocError;
use crate::crypto::CryptoError;
use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{what} {index} exceeds its capacity")]
    CapacityExceeded { what: &'static str, index: usize },
    #[error("database holds {total} identifiers, more than N = {n}")]
    DatabaseTooLarge { total: u64, n: u64 },
    #[error("{0} is full")]
    TableFull(&'static str),
    #[error("update of {got} identifiers exceeds the limit of {limit}")]
    UpdateTooLarge { got: usize, limit: usize },
    #[error("malformed plaintext in {0}")]
    Malformed(&'static str),
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("unknown keyword")]
    UnknownKeyword,
    #[error("update rejected: a touched bin would exceed capacity")]
    UpdateRejected,
    #[error("client dropped with an unflushed pending write")]
    PendingLost,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error: {0}")]
    Remote(String),
    #[error("block index {k} outside 1..={n}")]
    IndexOutOfRange { k: u64, n: u64 },
    #[error("block size {beta} below the required {need} words")]
    BlockTooSmall { beta: usize, need: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
