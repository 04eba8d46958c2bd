//! An encrypted data store with tunable leakage mitigation.
//!
//! The trusted client proxy smooths access frequencies over replicated,
//! encrypted buckets, decorrelates pending requests through a sampling pool,
//! answers range queries over bucketized sorted data, and absorbs updates
//! through a differentially oblivious dynamization scheme. The untrusted
//! server only ever sees pseudorandom labels and equal-length ciphertexts.

pub mod backend;
pub mod crypto;
pub mod domerge;
pub mod dynamize;
pub mod error;
pub mod leakage;
pub mod osort;
pub mod pool;
pub mod proxy;
pub mod rangestore;
pub mod rng;
pub mod smoothing;

pub use error::{Error, Result};
