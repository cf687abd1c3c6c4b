use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{BottleneckConfig, Layout};
use crate::error::{Error, Result};
use crate::numkit::{fnv1a, Matrix, RngStream};
use crate::Float;

/// Standard deviation of the Gaussian value-code initialisation.
pub const VALUE_INIT_STD: f64 = 0.02;
/// EMA counts at or below this leave a key where it is.
pub const KEY_DEAD_EPS: f64 = 1e-6;

/// One head's keys, values and EMA accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub head: usize,
    /// `K x d_key`, frozen after initialisation.
    pub keys: Matrix,
    /// `K x d_value`, trainable.
    pub values: Matrix,
    pub ema_count: Vec<Float>,
    pub ema_sum: Matrix,
    frozen: bool,
    key_hash: Option<u64>,
}

impl Codebook {
    pub fn random(head: usize, config: &BottleneckConfig, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (config.d_key as f64).sqrt();
        let keys = Matrix::from_fn(config.codebook_size, config.d_key, |_, _| {
            rng.gen_range(-bound..=bound) as Float
        });
        let normal = Normal::new(0.0, VALUE_INIT_STD).expect("valid std");
        let values = Matrix::from_fn(config.codebook_size, config.d_value, |_, _| {
            normal.sample(rng) as Float
        });
        Codebook::from_parts(head, keys, values)
    }

    pub fn from_parts(head: usize, keys: Matrix, values: Matrix) -> Self {
        let k = keys.rows();
        let d = keys.cols();
        Codebook {
            head,
            keys,
            values,
            ema_count: vec![0.0; k],
            ema_sum: Matrix::zeros(k, d),
            frozen: false,
            key_hash: None,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn key_hash(&self) -> Option<u64> {
        self.key_hash
    }

    fn state_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(24);
        bytes.extend_from_slice(&self.keys.content_hash().to_le_bytes());
        bytes.extend_from_slice(&self.ema_sum.content_hash().to_le_bytes());
        for c in &self.ema_count {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        fnv1a(&bytes)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.key_hash = Some(self.state_hash());
    }

    /// Re-opens the keys for another EMA pass, resetting the accumulators
    /// but keeping current key positions.
    pub fn reopen(&mut self) {
        self.frozen = false;
        self.key_hash = None;
        self.ema_count.iter_mut().for_each(|c| *c = 0.0);
        self.ema_sum = Matrix::zeros(self.ema_sum.rows(), self.ema_sum.cols());
    }

    /// Checks that keys and accumulators still hash to the freeze-time value.
    pub fn verify_frozen(&self) -> Result<()> {
        match self.key_hash {
            Some(h) if h == self.state_hash() => Ok(()),
            Some(_) => Err(Error::InvalidState(format!(
                "head {} keys changed after freeze",
                self.head
            ))),
            None => Err(Error::InvalidState(format!("head {} is not frozen", self.head))),
        }
    }
}

/// All head codebooks of one bottleneck plus its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub config: BottleneckConfig,
    pub layout: Layout,
    pub codebooks: Vec<Codebook>,
}

impl Bottleneck {
    /// Random keys uniform on `[-1/sqrt(d_key), 1/sqrt(d_key)]`, values
    /// Gaussian with std [`VALUE_INIT_STD`].
    pub fn new(config: BottleneckConfig, layout: Layout, seed: u64) -> Result<Self> {
        config.validate(layout)?;
        let heads = config.num_heads(layout);
        let codebooks = (0..heads)
            .map(|c| Codebook::random(c, &config, &mut RngStream::new(seed, 0xc0de_0000 + c as u64)))
            .collect();
        Ok(Bottleneck {
            config,
            layout,
            codebooks,
        })
    }

    /// Uses the given keys (e.g. from a checkpoint) with freshly initialised
    /// values of the configured width; the result is frozen.
    pub fn with_keys(config: BottleneckConfig, layout: Layout, keys: Vec<Matrix>, seed: u64) -> Result<Self> {
        let mut b = Bottleneck::new(config, layout, seed)?;
        if keys.len() != b.codebooks.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint has {} heads, configuration needs {}",
                keys.len(),
                b.codebooks.len()
            )));
        }
        for (cb, k) in b.codebooks.iter_mut().zip(keys) {
            if k.shape() != cb.keys.shape() {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint key table {:?} does not match {:?}",
                    k.shape(),
                    cb.keys.shape()
                )));
            }
            cb.keys = k;
            cb.freeze();
        }
        Ok(b)
    }

    pub fn num_heads(&self) -> usize {
        self.codebooks.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.codebooks.iter().all(Codebook::is_frozen)
    }

    pub fn freeze(&mut self) {
        self.codebooks.iter_mut().for_each(Codebook::freeze);
    }

    pub fn reopen(&mut self) {
        self.codebooks.iter_mut().for_each(Codebook::reopen);
    }

    pub fn verify_frozen(&self) -> Result<()> {
        self.codebooks.iter().try_for_each(Codebook::verify_frozen)
    }

    /// Hash over every head's key table.
    pub fn key_table_hash(&self) -> u64 {
        let bytes: Vec<u8> = self
            .codebooks
            .iter()
            .flat_map(|cb| cb.keys.content_hash().to_le_bytes())
            .collect();
        fnv1a(&bytes)
    }

    /// Per-head hashes of every value row, for locality checks.
    pub fn value_row_hashes(&self) -> Vec<Vec<u64>> {
        self.codebooks
            .iter()
            .map(|cb| (0..cb.values.rows()).map(|r| cb.values.row_hash(r)).collect())
            .collect()
    }

    /// Appends zero columns to every value table (single-head growth of the
    /// class set under the non-parametric decoder).
    pub fn grow_values(&mut self, new_d_value: usize) {
        if new_d_value <= self.config.d_value {
            return;
        }
        for cb in &mut self.codebooks {
            let old = &cb.values;
            cb.values = Matrix::from_fn(old.rows(), new_d_value, |r, c| {
                if c < old.cols() {
                    old.get(r, c)
                } else {
                    0.0
                }
            });
        }
        self.config.d_value = new_d_value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BottleneckConfig {
        BottleneckConfig {
            d_key: 4,
            codebook_size: 16,
            d_value: 3,
            ..Default::default()
        }
    }

    const LAYOUT: Layout = Layout { t: 4, h: 8, cls_flag: true };

    #[test]
    fn random_init_ranges() {
        let b = Bottleneck::new(cfg(), LAYOUT, 1).unwrap();
        assert_eq!(b.num_heads(), 2);
        for cb in &b.codebooks {
            assert!(cb.keys.as_slice().iter().all(|&x| x.abs() <= 0.5));
            assert!(cb.values.as_slice().iter().all(|&x| x.abs() < 0.2));
        }
        assert_eq!(b, Bottleneck::new(cfg(), LAYOUT, 1).unwrap());
        assert_ne!(b.key_table_hash(), Bottleneck::new(cfg(), LAYOUT, 2).unwrap().key_table_hash());
    }

    #[test]
    fn freeze_detects_tampering() {
        let mut b = Bottleneck::new(cfg(), LAYOUT, 1).unwrap();
        assert!(b.verify_frozen().is_err());
        b.freeze();
        b.verify_frozen().unwrap();
        b.codebooks[1].keys.set(0, 0, 9.0);
        assert!(b.verify_frozen().is_err());
    }

    #[test]
    fn reopen_keeps_keys_resets_stats() {
        let mut b = Bottleneck::new(cfg(), LAYOUT, 1).unwrap();
        b.codebooks[0].ema_count[0] = 3.0;
        b.freeze();
        let h = b.key_table_hash();
        b.reopen();
        assert!(!b.is_frozen());
        assert_eq!(b.key_table_hash(), h);
        assert_eq!(b.codebooks[0].ema_count[0], 0.0);
    }

    #[test]
    fn grow_values_appends_zero_columns() {
        let mut b = Bottleneck::new(cfg(), LAYOUT, 1).unwrap();
        let before = b.codebooks[0].values.clone();
        b.grow_values(5);
        assert_eq!(b.codebooks[0].values.cols(), 5);
        assert_eq!(&b.codebooks[0].values.row(2)[..3], before.row(2));
        assert_eq!(b.codebooks[0].values.get(2, 4), 0.0);
    }
}
