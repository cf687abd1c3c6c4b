//! The discrete key-value bottleneck.
//!
//! An encoding is split into heads ([`segment`]), each head input is mapped
//! to its nearest frozen key by L2 distance ([`quantize`]) and the paired
//! trainable value code is read out ([`retrieve`]). Keys are placed by an
//! EMA pass over encoded inputs ([`Bottleneck::ema_init`]) and then frozen;
//! no gradient ever reaches them.

mod checkpoint;
mod codebook;
mod config;
mod ema;

mod quantize;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, DECODER_MAGIC};
pub use codebook::{Bottleneck, Codebook, KEY_DEAD_EPS, VALUE_INIT_STD};
pub use config::{BottleneckConfig, DecoderKind, Layout, Segmentation};
pub use ema::Encoding;
pub use quantize::{
    nearest_key, quantize, retrieve, segment, Assignment, HeadInputs, Representation,
};
