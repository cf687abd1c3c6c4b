//! Minimal dense numeric kernel shared by the bottleneck, decoders and
//! baselines.
//!
//! Storage uses [`Float`](crate::Float) (32-bit by default, 64-bit with the
//! `f64` feature); every reduction accumulates in `f64`.

mod matrix;
mod ops;
mod optim;
mod rng;

pub use matrix::{fnv1a, Matrix};
pub use ops::{cross_entropy_with_grad, dropout_mask, log_sum_exp, softmax};
pub use optim::{lazy_step, AdamWConfig, OptimState, RowGrads};
pub use rng::RngStream;
