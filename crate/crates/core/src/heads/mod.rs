//! Pooling, the parametric and non-parametric decoders, and task routing.

mod decoder;
mod pooling;
mod registry;

pub use decoder::{
    decode_nonparametric, decode_parametric, nonparametric_backward, ParametricCache,
    ParametricDecoder, ParametricGrads, DEFAULT_DROPOUT,
};
pub use pooling::{pool, PoolingMode, PoolingOp, PoolingPosition};
pub use registry::{route, HeadRegistry, ScopedLogits, TaskHead};
