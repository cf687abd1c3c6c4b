use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::codebook::{Bottleneck, Codebook};
use super::config::{BottleneckConfig, Segmentation};
use crate::error::{Error, Result};
use crate::heads::{pool, PoolingMode, PoolingPosition};
use crate::numkit::{Matrix, RowGrads};
use crate::Float;

/// Flat list of `d_key`-long head inputs with their `(head, instance)`
/// coordinates. The instance is the token position under hidden
/// segmentation and the hidden channel under token segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadInputs {
    pub d_key: usize,
    pub coords: Vec<(usize, usize)>,
    data: Vec<Float>,
}

impl HeadInputs {
    fn new(d_key: usize) -> Self {
        HeadInputs {
            d_key,
            coords: Vec::new(),
            data: Vec::new(),
        }
    }

    fn push(&mut self, head: usize, instance: usize, v: impl IntoIterator<Item = Float>) {
        self.coords.push((head, instance));
        self.data.extend(v);
        debug_assert_eq!(self.data.len(), self.coords.len() * self.d_key);
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[Float] {
        &self.data[i * self.d_key..(i + 1) * self.d_key]
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &[Float])> {
        self.coords
            .iter()
            .copied()
            .zip(self.data.chunks_exact(self.d_key))
    }
}

/// Does instance `instance` of head `head` feed the head's output?
fn contributes(config: &BottleneckConfig, head: usize, instance: usize) -> bool {
    match (config.pooling.position, config.pooling.mode, config.segmentation) {
        (PoolingPosition::Before, _, _) | (PoolingPosition::After, PoolingMode::Mean, _) => true,
        (PoolingPosition::After, PoolingMode::Cls, Segmentation::Hidden) => instance == 0,
        (PoolingPosition::After, PoolingMode::Cls, Segmentation::Token) => head == 0,
    }
}

fn segment_filtered(
    z: &Matrix,
    valid: usize,
    config: &BottleneckConfig,
    only_contributing: bool,
) -> Result<HeadInputs> {
    let d = config.d_key;
    let keep = |head, inst| !only_contributing || contributes(config, head, inst);
    let mut out = HeadInputs::new(d);
    if config.pooling.position == PoolingPosition::Before {
        if config.segmentation != Segmentation::Hidden {
            return Err(Error::InvalidConfig(
                "pooling before the bottleneck needs hidden segmentation".into(),
            ));
        }
        if z.rows() != 1 {
            return Err(Error::InvalidInput(format!(
                "pooled input must be 1 x h, got {:?}",
                z.shape()
            )));
        }
        if !z.cols().is_multiple_of(d) {
            return Err(Error::InvalidConfig(format!(
                "d_key {d} does not divide hidden size {}",
                z.cols()
            )));
        }
        for c in 0..z.cols() / d {
            out.push(c, 0, z.row(0)[c * d..(c + 1) * d].iter().copied());
        }
        return Ok(out);
    }
    if valid == 0 || valid > z.rows() {
        return Err(Error::InvalidInput(format!(
            "valid_tokens {valid} outside 1..={}",
            z.rows()
        )));
    }
    match config.segmentation {
        Segmentation::Hidden => {
            if !z.cols().is_multiple_of(d) {
                return Err(Error::InvalidConfig(format!(
                    "d_key {d} does not divide hidden size {}",
                    z.cols()
                )));
            }
            let heads = z.cols() / d;
            for p in 0..valid {
                let row = z.row(p);
                for c in 0..heads {
                    if keep(c, p) {
                        out.push(c, p, row[c * d..(c + 1) * d].iter().copied());
                    }
                }
            }
        }
        Segmentation::Token => {
            if z.rows() < d {
                return Err(Error::InvalidConfig(format!(
                    "d_key {d} exceeds token length {}",
                    z.rows()
                )));
            }
            // A sequence shorter than one slice still yields head 0, reading
            // into the zero padding.
            let heads = (valid / d).max(1);
            for j in 0..z.cols() {
                for c in 0..heads {
                    if keep(c, j) {
                        out.push(c, j, (c * d..(c + 1) * d).map(|p| z.get(p, j)));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Cuts an encoding into head inputs. With pooling before the bottleneck,
/// `z` is the pooled `1 x h` vector and each head has a single instance.
pub fn segment(z: &Matrix, valid: usize, config: &BottleneckConfig) -> Result<HeadInputs> {
    segment_filtered(z, valid, config, false)
}

/// Index of the key nearest to `query` in L2 distance; ties go to the
/// lowest index.
pub fn nearest_key(query: &[Float], keys: &Matrix) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, key) in keys.iter_rows().enumerate() {
        let dist: f64 = key
            .iter()
            .zip(query)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    best
}

pub fn quantize(head_input: &[Float], codebook: &Codebook) -> Result<usize> {
    if codebook.is_empty() {
        return Err(Error::InvalidState(format!(
            "codebook of head {} is empty",
            codebook.head
        )));
    }
    if head_input.len() != codebook.keys.cols() {
        return Err(Error::InvalidInput(format!(
            "head input has {} dims, keys have {}",
            head_input.len(),
            codebook.keys.cols()
        )));
    }
    Ok(nearest_key(head_input, &codebook.keys))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Assignment {
    pub head: usize,
    pub instance: usize,
    pub key: usize,
}

/// Per-head retrieved values after in-bottleneck aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    /// `C x d_value`; rows of heads without contributing instances are zero.
    pub values: Matrix,
    /// Per head, the selected keys and their aggregation weights (summing
    /// to one for every present head).
    pub contributions: Vec<Vec<(usize, Float)>>,
}

impl Representation {
    pub fn num_heads(&self) -> usize {
        self.contributions.len()
    }

    pub fn is_present(&self, head: usize) -> bool {
        !self.contributions[head].is_empty()
    }

    pub fn num_present(&self) -> usize {
        self.contributions.iter().filter(|c| !c.is_empty()).count()
    }

    /// The `(head, key)` pairs whose value rows this forward pass read.
    pub fn touched(&self) -> BTreeSet<(usize, usize)> {
        self.contributions
            .iter()
            .enumerate()
            .flat_map(|(c, ks)| ks.iter().map(move |&(k, _)| (c, k)))
            .collect()
    }

    /// Chain rule from `d loss / d values` (`C x d_value`) into the value
    /// tables, one [`RowGrads`] per head.
    pub fn backprop(&self, drep: &Matrix, grads: &mut [RowGrads]) {
        for (c, ks) in self.contributions.iter().enumerate() {
            for &(k, w) in ks {
                grads[c].add(k, drep.row(c), w);
            }
        }
    }
}

/// Reads out and aggregates value codes for a set of assignments.
pub fn retrieve(assignments: &[Assignment], bottleneck: &Bottleneck) -> Result<Representation> {
    let heads = bottleneck.num_heads();
    let d_value = bottleneck.config.d_value;
    let mut counts: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); heads];
    for a in assignments {
        if a.head >= heads {
            return Err(Error::Index {
                index: a.head,
                len: heads,
            });
        }
        let cb = &bottleneck.codebooks[a.head];
        if a.key >= cb.len() {
            return Err(Error::Index {
                index: a.key,
                len: cb.len(),
            });
        }
        if contributes(&bottleneck.config, a.head, a.instance) {
            *counts[a.head].entry(a.key).or_default() += 1;
        }
    }
    let mut values = Matrix::zeros(heads, d_value);
    let mut contributions = Vec::with_capacity(heads);
    for (c, per_key) in counts.into_iter().enumerate() {
        let n: usize = per_key.values().sum();
        let mut acc = vec![0f64; d_value];
        let mut ks = Vec::with_capacity(per_key.len());
        for (k, count) in per_key {
            let w = count as f64 / n as f64;
            for (a, &v) in acc.iter_mut().zip(bottleneck.codebooks[c].values.row(k)) {
                *a += w * v as f64;
            }
            ks.push((k, w as Float));
        }
        for (o, a) in values.row_mut(c).iter_mut().zip(acc) {
            *o = a as Float;
        }
        contributions.push(ks);
    }
    Ok(Representation {
        values,
        contributions,
    })
}

const PARALLEL_MIN: usize = 256;

impl Bottleneck {
    /// Head inputs that feed the output under the configured pooling. With
    /// pooling before the bottleneck the encoding is pooled first.
    pub fn head_inputs(&self, z: &Matrix, valid: usize) -> Result<HeadInputs> {
        if z.shape() != (self.layout.t, self.layout.h) {
            return Err(Error::InvalidInput(format!(
                "encoding shape {:?} does not match layout {}x{}",
                z.shape(),
                self.layout.t,
                self.layout.h
            )));
        }
        if self.config.pooling.position == PoolingPosition::Before {
            let pooled = pool(z, self.config.pooling.mode, valid, self.layout.cls_flag)?;
            let pooled = Matrix::from_vec(1, pooled.len(), pooled)?;
            segment_filtered(&pooled, 1, &self.config, true)
        } else {
            segment_filtered(z, valid, &self.config, true)
        }
    }

    /// Nearest-key assignment for every head input.
    pub fn assign(&self, inputs: &HeadInputs) -> Vec<Assignment> {
        let one = |i: usize| {
            let (head, instance) = inputs.coords[i];
            Assignment {
                head,
                instance,
                key: nearest_key(inputs.vector(i), &self.codebooks[head].keys),
            }
        };
        if inputs.len() >= PARALLEL_MIN {
            (0..inputs.len()).into_par_iter().map(one).collect()
        } else {
            (0..inputs.len()).map(one).collect()
        }
    }

    /// segment -> quantize -> retrieve on frozen codebooks.
    pub fn forward(&self, z: &Matrix, valid: usize) -> Result<Representation> {
        if !self.is_frozen() {
            return Err(Error::InvalidState(
                "forward pass needs frozen codebooks".into(),
            ));
        }
        let inputs = self.head_inputs(z, valid)?;
        retrieve(&self.assign(&inputs), self)
    }

    /// Fresh zeroed gradient accumulators, one per head value table.
    pub fn zero_value_grads(&self) -> Vec<RowGrads> {
        (0..self.num_heads())
            .map(|_| RowGrads::new(self.config.d_value))
            .collect()
    }
}
