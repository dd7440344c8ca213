//! Locality-aware searchable encryption over an instrumented page store.

pub mod alloc;
pub mod clip;
pub mod crypto;
pub mod db;
pub mod error;
pub mod layered;
pub mod local;
pub mod oram;
pub mod runner;
pub mod scalar;
pub mod scheme;
pub mod store;
pub mod wire;
pub mod workload;

pub use error::{Error, Result};
pub use scalar::{Exact, Scalar};

/// Allocator over floating-point weights, for statistical campaigns.
pub type L2c = alloc::L2c<f64>;
/// Allocator over exact rational weights, as used by the encrypted index.
pub type ExactL2c = alloc::L2c<Exact>;
