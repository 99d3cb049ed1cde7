//! Adaptive KV-cache pruning on a deterministic toy transformer.
//!
//! The crate is organized around a prefill-then-decode inference loop:
//! [`model`] runs a seeded decoder-only transformer and exposes its
//! per-head attention rows, [`pruner`] decides which cache positions to
//! keep by ranking positions and halting on a relative Frobenius-norm
//! loss, [`baselines`] provides fixed-budget eviction policies for
//! comparison, and [`oracle`] holds brute-force reference
//! implementations that the fast paths are checked against. [`trace`]
//! defines a binary format for attention-row dumps plus the CSV schemas
//! used by the [`harness`] commands.

pub mod baselines;
pub mod error;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod prompts;
pub mod pruner;
pub mod rng;
pub mod tensor;
pub mod trace;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
