//! Discrete key-value bottleneck (DKVB) for continual learning on frozen
//! text-encoder embeddings.
//!
//! The pipeline is: frozen token embeddings ([`embed_store`]) are split into
//! heads and quantized against frozen per-head key codebooks
//! ([`bottleneck`]); the retrieved trainable value codes are decoded by a
//! parametric or non-parametric head ([`heads`]). [`harness`] runs the
//! domain-, class- and task-type-incremental scenarios and computes the
//! metrics; [`baselines`] holds the frozen-encoder comparison methods.

// casts between Float and f64 are no-ops in the f64 build only
#![cfg_attr(feature = "f64", allow(clippy::unnecessary_cast))]

pub mod baselines;
pub mod bottleneck;
pub mod embed_store;
pub mod error;
pub mod harness;
pub mod heads;
pub mod numkit;

pub use error::{Error, Result};

/// Scalar type for in-memory tensors.
#[cfg(feature = "f64")]
pub type Float = f64;
/// Scalar type for in-memory tensors.
#[cfg(not(feature = "f64"))]
pub type Float = f32;
