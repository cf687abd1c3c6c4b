//! Deterministic stand-in for a frozen text encoder.
//!
//! Each token ID (reduced modulo the vocabulary-hash width) maps to a fixed
//! pseudo-random embedding row derived from the spec seed. An optional
//! symmetric window average over neighbouring valid rows gives a weak
//! contextualisation. A shared offset added to every row mimics the
//! anisotropy of real encoder embeddings (all vectors share a dominant
//! common direction).

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{fnv1a, Matrix, RngStream};
use crate::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderSpec {
    pub seed: u64,
    /// Token IDs are reduced modulo this width before hashing.
    pub vocab_width: u32,
    pub t: usize,
    pub h: usize,
    /// Neighbours on each side averaged into a row; 0 disables mixing.
    pub window: usize,
    /// Prepend a fixed sentinel row at position 0.
    pub cls_flag: bool,
    /// Scale of the common offset added to every row (per-coordinate
    /// standard deviation, token rows having 1). 0 gives isotropic rows.
    #[serde(default)]
    pub anisotropy: f64,
}

impl ToyEncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 {
            return Err(Error::InvalidConfig("toy encoder needs t, h > 0".into()));
        }
        if self.vocab_width == 0 {
            return Err(Error::InvalidConfig("toy encoder vocab_width must be > 0".into()));
        }
        if !(self.anisotropy.is_finite() && self.anisotropy >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "toy encoder anisotropy {} must be finite and >= 0",
                self.anisotropy
            )));
        }
        if self.cls_flag && self.t < 2 {
            return Err(Error::InvalidConfig("cls_flag needs t >= 2".into()));
        }
        Ok(())
    }

    fn row(&self, key: u64) -> Vec<Float> {
        let mut rng = RngStream::new(self.seed, key);
        (0..self.h)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as Float
            })
            .collect()
    }

    fn token_row(&self, token: u32) -> Vec<Float> {
        let reduced = token % self.vocab_width;
        // counter 0 is reserved for the sentinel
        self.row(fnv1a(&reduced.to_le_bytes()) | 1)
    }

    fn sentinel_row(&self) -> Vec<Float> {
        self.row(0)
    }

    /// Common offset; counter 2 is even, so it never collides with a token.
    fn offset_row(&self) -> Vec<Float> {
        let a = self.anisotropy as Float;
        self.row(2).into_iter().map(|x| a * x).collect()
    }
}

/// Encodes a token sequence into a `t x h` matrix and its valid length.
pub fn toy_encode(token_ids: &[u32], spec: &ToyEncoderSpec) -> Result<(Matrix, usize)> {
    spec.validate()?;
    if token_ids.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    let offset = spec.cls_flag as usize;
    let valid = (token_ids.len() + offset).min(spec.t);

    let mut base: Vec<Vec<Float>> = Vec::with_capacity(valid);
    if spec.cls_flag {
        base.push(spec.sentinel_row());
    }
    base.extend(token_ids[..valid - offset].iter().map(|&tok| spec.token_row(tok)));
    if spec.anisotropy > 0.0 {
        let shift = spec.offset_row();
        for row in &mut base {
            row.iter_mut().zip(&shift).for_each(|(x, s)| *x += s);
        }
    }

    let mut z = Matrix::zeros(spec.t, spec.h);
    for p in 0..valid {
        let lo = p.saturating_sub(spec.window);
        let hi = (p + spec.window).min(valid - 1);
        let n = (hi - lo + 1) as f64;
        let out = z.row_mut(p);
        for (j, o) in out.iter_mut().enumerate() {
            let s: f64 = (lo..=hi).map(|q| base[q][j] as f64).sum();
            *o = (s / n) as Float;
        }
    }
    Ok((z, valid))
}
