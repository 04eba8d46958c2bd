use thiserror::Error;

/// Errors surfaced by the store, proxy, and server components.
#[derive(Debug, Error)]
pub enum Error {
    /// AEAD authentication failed: tampered ciphertext or wrong label.
    #[error("authentication failure opening bucket")]
    AuthFailure,

    /// A configuration value is out of its admissible range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Replica allocation could not fit into the available slots.
    #[error("replica allocation error: requested {requested} slots, have {available}")]
    Allocation { requested: usize, available: usize },

    /// The server was asked for a label it does not hold.
    #[error("missing label on server")]
    MissingLabel,

    /// The DO-merge working buffer would exceed its fixed capacity.
    #[error("merge buffer overflow: occupancy {occupancy} exceeds capacity {capacity}")]
    BufferOverflow { occupancy: usize, capacity: usize },

    /// Bin-capacity search exhausted its bracket without a feasible value.
    #[error("bin capacity search failed: no feasible value below {bound}")]
    CapacitySearch { bound: usize },

    /// Wire protocol violation or framing error.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("persistence format error: {0}")]
    Persistence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
