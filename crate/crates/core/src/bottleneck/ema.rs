use super::codebook::{Bottleneck, KEY_DEAD_EPS};
use crate::embed_store::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::Float;

/// Anything that carries a token-level encoding.
pub trait Encoding {
    fn matrix(&self) -> &Matrix;
    fn valid_tokens(&self) -> usize;
}

impl Encoding for EmbeddingRecord {
    fn matrix(&self) -> &Matrix {
        &self.z
    }

    fn valid_tokens(&self) -> usize {
        self.valid()
    }
}

impl<T: Encoding + ?Sized> Encoding for &T {
    fn matrix(&self) -> &Matrix {
        (**self).matrix()
    }

    fn valid_tokens(&self) -> usize {
        (**self).valid_tokens()
    }
}

impl<T: Encoding + ?Sized> Encoding for std::sync::Arc<T> {
    fn matrix(&self) -> &Matrix {
        (**self).matrix()
    }

    fn valid_tokens(&self) -> usize {
        (**self).valid_tokens()
    }
}

impl Encoding for (Matrix, usize) {
    fn matrix(&self) -> &Matrix {
        &self.0
    }

    fn valid_tokens(&self) -> usize {
        self.1
    }
}

impl Bottleneck {
    /// One EMA update from a batch of encodings.
    ///
    /// Per head, every head input is assigned to its nearest current key;
    /// then for every key `count <- g*count + (1-g)*n` and
    /// `sum <- g*sum + (1-g)*Σx`, and keys assigned in this batch move to
    /// `sum / count` when `count > KEY_DEAD_EPS`.
    pub fn ema_step<E: Encoding>(&mut self, batch: &[E], gamma: f64) -> Result<()> {
        if self.codebooks.iter().any(|cb| cb.is_frozen()) {
            return Err(Error::InvalidState(
                "EMA update on frozen codebooks".into(),
            ));
        }
        let heads = self.num_heads();
        let d = self.config.d_key;
        let k = self.config.codebook_size;
        let mut counts = vec![vec![0usize; k]; heads];
        let mut sums = vec![vec![0f64; k * d]; heads];
        for e in batch {
            let inputs = self.head_inputs(e.matrix(), e.valid_tokens())?;
            for (i, a) in self.assign(&inputs).into_iter().enumerate() {
                counts[a.head][a.key] += 1;
                let acc = &mut sums[a.head][a.key * d..(a.key + 1) * d];
                for (s, &x) in acc.iter_mut().zip(inputs.vector(i)) {
                    *s += x as f64;
                }
            }
        }
        for (cb, (n, s)) in self.codebooks.iter_mut().zip(counts.iter().zip(&sums)) {
            for key in 0..k {
                let count = gamma * cb.ema_count[key] as f64 + (1.0 - gamma) * n[key] as f64;
                cb.ema_count[key] = count as Float;
                let sum_row = cb.ema_sum.row_mut(key);
                for (j, acc) in sum_row.iter_mut().enumerate() {
                    *acc = (gamma * *acc as f64 + (1.0 - gamma) * s[key * d + j]) as Float;
                }
                if n[key] > 0 && count > KEY_DEAD_EPS {
                    let sum_row = cb.ema_sum.row(key).to_vec();
                    for (dst, src) in cb.keys.row_mut(key).iter_mut().zip(sum_row) {
                        *dst = (src as f64 / count) as Float;
                    }
                }
            }
        }
        Ok(())
    }

    /// Runs `epochs` passes of EMA updates over `data` in batches of
    /// `batch_size` (in the given order), then freezes the keys.
    pub fn ema_init<E: Encoding>(
        &mut self,
        data: &[E],
        batch_size: usize,
        gamma: f64,
        epochs: usize,
    ) -> Result<()> {
        if self.codebooks.iter().any(|cb| cb.is_frozen()) {
            return Err(Error::InvalidState(
                "key initialisation on frozen codebooks".into(),
            ));
        }
        if batch_size == 0 {
            return Err(Error::InvalidConfig("EMA batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidConfig(format!("EMA decay {gamma} outside [0, 1]")));
        }
        for _ in 0..epochs {
            for batch in data.chunks(batch_size) {
                self.ema_step(batch, gamma)?;
            }
        }
        self.freeze();
        Ok(())
    }

    /// Mean L2 distance from each head input to its nearest key.
    pub fn mean_quantization_error<E: Encoding>(&self, data: &[E]) -> Result<f64> {
        let mut total = 0f64;
        let mut n = 0usize;
        for e in data {
            let inputs = self.head_inputs(e.matrix(), e.valid_tokens())?;
            for (i, a) in self.assign(&inputs).into_iter().enumerate() {
                let key = self.codebooks[a.head].keys.row(a.key);
                let d2: f64 = key
                    .iter()
                    .zip(inputs.vector(i))
                    .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                    .sum();
                total += d2.sqrt();
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::InvalidInput("no head inputs".into()));
        }
        Ok(total / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bottleneck::{BottleneckConfig, Layout};

    fn planar(k: usize) -> Bottleneck {
        let config = BottleneckConfig {
            d_key: 2,
            codebook_size: k,
            d_value: 1,
            ..Default::default()
        };
        Bottleneck::new(config, Layout { t: 1, h: 2, cls_flag: false }, 3).unwrap()
    }

    fn point(x: Float, y: Float) -> (Matrix, usize) {
        (Matrix::from_vec(1, 2, vec![x, y]).unwrap(), 1)
    }

    #[test]
    fn decay_free_step_jumps_to_means() {
        let mut b = planar(4);
        let keys = b.codebooks[0].keys.clone();
        let batch = [point(5.0, 5.0), point(7.0, 5.0)];
        let target = nearest(&keys, &[6.0, 5.0]);
        b.ema_step(&batch, 0.0).unwrap();
        // both points share the nearest key, which lands on their mean
        assert_eq!(b.codebooks[0].keys.row(target), &[6.0, 5.0]);
        for r in (0..4).filter(|&r| r != target) {
            assert_eq!(b.codebooks[0].keys.row(r), keys.row(r));
        }
    }

    fn nearest(keys: &Matrix, q: &[Float]) -> usize {
        crate::bottleneck::nearest_key(q, keys)
    }

    #[test]
    fn unselected_keys_stay_put() {
        let mut b = planar(8);
        let before = b.codebooks[0].keys.clone();
        let data: Vec<_> = (0..20).map(|i| point(3.0 + 0.01 * i as Float, 3.0)).collect();
        b.ema_init(&data, 5, 0.2, 3).unwrap();
        let moved: Vec<usize> = (0..8)
            .filter(|&r| b.codebooks[0].keys.row(r) != before.row(r))
            .collect();
        assert_eq!(moved.len(), 1);
        assert!(b.is_frozen());
        b.verify_frozen().unwrap();
    }

    #[test]
    fn frozen_codebooks_reject_updates() {
        let mut b = planar(2);
        b.freeze();
        assert!(matches!(b.ema_step(&[point(0.0, 0.0)], 0.2), Err(Error::InvalidState(_))));
        assert!(matches!(
            b.ema_init(&[point(0.0, 0.0)], 1, 0.2, 1),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn count_follows_recurrence() {
        let mut b = planar(1);
        b.ema_step(&[point(1.0, 1.0), point(1.0, 1.0)], 0.2).unwrap();
        assert!((b.codebooks[0].ema_count[0] as f64 - 1.6).abs() < 1e-6);
        b.ema_step(&[point(1.0, 1.0)], 0.2).unwrap();
        assert!((b.codebooks[0].ema_count[0] as f64 - (0.2 * 1.6 + 0.8)).abs() < 1e-6);
        assert_eq!(b.codebooks[0].keys.row(0), &[1.0, 1.0]);
    }
}
