//! Synthetic labelled corpus run through the toy encoder.
//!
//! The vocabulary is laid out as `[shared | per-domain blocks | per-class
//! blocks]`. A document draws each token from the shared block with
//! probability `shared_fraction`, from its domain block with probability
//! `domain_fraction` and otherwise from its class block, so class identity
//! lives in which tokens appear, as in bag-of-words text.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::format::{sample_id, EmbeddingRecord, RecordSet};
use super::manifest::{Dataset, Split};
use super::toy::{toy_encode, ToyEncoderSpec};
use crate::error::{Error, Result};
use crate::numkit::{fnv1a, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub classes: usize,
    pub domains: usize,
    /// Number of distinct task types; class `c` gets task type
    /// `c * task_types / classes`.
    pub task_types: usize,
    /// Samples per (class, domain) pair.
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Maximum document length in tokens; lengths are drawn from
    /// `[doc_len / 2, doc_len]`.
    pub doc_len: usize,
    pub vocab_per_class: u32,
    pub vocab_per_domain: u32,
    pub shared_vocab: u32,
    pub shared_fraction: f64,
    pub domain_fraction: f64,
    pub encoder: ToyEncoderSpec,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            name: "synthetic".into(),
            classes: 8,
            domains: 1,
            task_types: 1,
            train_per_class: 100,
            val_per_class: 0,
            test_per_class: 50,
            doc_len: 24,
            vocab_per_class: 16,
            vocab_per_domain: 0,
            shared_vocab: 16,
            shared_fraction: 0.3,
            domain_fraction: 0.0,
            encoder: ToyEncoderSpec {
                seed: 17,
                vocab_width: 1 << 16,
                t: 32,
                h: 32,
                window: 1,
                cls_flag: true,
                anisotropy: 1.0,
            },
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    fn vocab_total(&self) -> u64 {
        self.shared_vocab as u64
            + self.domains as u64 * self.vocab_per_domain as u64
            + self.classes as u64 * self.vocab_per_class as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.classes == 0 || self.domains == 0 || self.task_types == 0 {
            return Err(Error::InvalidConfig(
                "synthetic classes, domains and task_types must be positive".into(),
            ));
        }
        if self.task_types > self.classes {
            return Err(Error::InvalidConfig("more task types than classes".into()));
        }
        if self.doc_len == 0 || self.vocab_per_class == 0 {
            return Err(Error::InvalidConfig(
                "synthetic doc_len and vocab_per_class must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&(self.shared_fraction + self.domain_fraction))
            || self.shared_fraction < 0.0
            || self.domain_fraction < 0.0
        {
            return Err(Error::InvalidConfig(
                "shared_fraction + domain_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.shared_fraction > 0.0 && self.shared_vocab == 0 {
            return Err(Error::InvalidConfig("shared_fraction > 0 needs shared_vocab".into()));
        }
        if self.domain_fraction > 0.0 && self.vocab_per_domain == 0 {
            return Err(Error::InvalidConfig("domain_fraction > 0 needs vocab_per_domain".into()));
        }
        if self.vocab_total() > self.encoder.vocab_width as u64 {
            return Err(Error::InvalidConfig(format!(
                "synthetic vocabulary of {} exceeds encoder vocab_width {}",
                self.vocab_total(),
                self.encoder.vocab_width
            )));
        }
        Ok(())
    }

    fn draw_doc(&self, class: usize, domain: usize, rng: &mut RngStream) -> Vec<u32> {
        let len = rng.gen_range((self.doc_len / 2).max(1)..=self.doc_len);
        let domain_base = self.shared_vocab;
        let class_base = domain_base + self.domains as u32 * self.vocab_per_domain;
        (0..len)
            .map(|_| {
                let u: f64 = rng.gen();
                if u < self.shared_fraction {
                    rng.gen_range(0..self.shared_vocab)
                } else if u < self.shared_fraction + self.domain_fraction {
                    domain_base
                        + domain as u32 * self.vocab_per_domain
                        + rng.gen_range(0..self.vocab_per_domain)
                } else {
                    class_base
                        + class as u32 * self.vocab_per_class
                        + rng.gen_range(0..self.vocab_per_class)
                }
            })
            .collect()
    }

    fn split_set(&self, split: Split, per_class: usize) -> Result<RecordSet> {
        let enc = &self.encoder;
        let mut set = RecordSet::new(enc.t, enc.h, enc.cls_flag);
        for domain in 0..self.domains {
            for class in 0..self.classes {
                let key = format!("{}/{split}/{domain}/{class}", self.name);
                let mut rng = RngStream::new(self.seed, fnv1a(key.as_bytes()));
                for i in 0..per_class {
                    let doc = self.draw_doc(class, domain, &mut rng);
                    let (z, valid) = toy_encode(&doc, enc)?;
                    set.records.push(EmbeddingRecord {
                        id: sample_id(&format!("{key}/{i}")),
                        z,
                        label: class as u32,
                        task_id: (class * self.task_types / self.classes) as u32,
                        domain_id: domain as u32,
                        valid_tokens: valid as u32,
                    });
                }
            }
        }
        Ok(set)
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        name: spec.name.clone(),
        train: spec.split_set(Split::Train, spec.train_per_class)?,
        val: spec.split_set(Split::Val, spec.val_per_class)?,
        test: spec.split_set(Split::Test, spec.test_per_class)?,
    })
}

/// Unlabelled documents drawn uniformly over the whole vocabulary, a
/// stand-in for a cross-domain corpus used for generic key initialisation.
pub fn generic_corpus(spec: &SyntheticSpec, docs: usize, seed: u64) -> Result<RecordSet> {
    spec.validate()?;
    let enc = &spec.encoder;
    let total = spec.vocab_total() as u32;
    let mut rng = RngStream::new(seed, fnv1a(b"generic-corpus"));
    let mut set = RecordSet::new(enc.t, enc.h, enc.cls_flag);
    for i in 0..docs {
        let len = rng.gen_range((spec.doc_len / 2).max(1)..=spec.doc_len);
        let doc: Vec<u32> = (0..len).map(|_| rng.gen_range(0..total)).collect();
        let (z, valid) = toy_encode(&doc, enc)?;
        set.records.push(EmbeddingRecord {
            id: sample_id(&format!("generic/{seed}/{i}")),
            z,
            label: 0,
            task_id: 0,
            domain_id: 0,
            valid_tokens: valid as u32,
        });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            domains: 2,
            task_types: 2,
            train_per_class: 3,
            val_per_class: 1,
            test_per_class: 2,
            vocab_per_domain: 4,
            domain_fraction: 0.2,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_metadata() {
        let ds = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.train.len(), 4 * 2 * 3);
        assert_eq!(ds.val.len(), 4 * 2);
        assert_eq!(ds.test.len(), 4 * 2 * 2);
        assert_eq!(ds.num_classes(), 4);
        assert!(ds.train.records.iter().all(|r| r.task_id == r.label / 2));
        let mut ids: Vec<u64> = ds.train.records.iter().map(|r| r.id).collect();
        ids.extend(ds.test.records.iter().map(|r| r.id));
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn reproducible() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
    }

    #[test]
    fn rejects_oversized_vocab() {
        let mut s = small();
        s.encoder.vocab_width = 10;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn generic_corpus_is_unlabelled() {
        let c = generic_corpus(&small(), 5, 9).unwrap();
        assert_eq!(c.len(), 5);
        assert!(c.records.iter().all(|r| r.label == 0));
    }
}
