use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::scenario::{ScenarioSpec, TaskSet};
use crate::embed_store::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::numkit::RngStream;

/// Training hyperparameters shared by every method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the bottleneck value tables.
    pub values_lr: f64,
    /// Learning rate of parametric decoders and of the baseline probes.
    pub decoder_lr: f64,
    pub dropout: f64,
    pub weight_decay: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 10,
            batch_size: 16,
            values_lr: 1e-2,
            decoder_lr: 1e-3,
            dropout: 0.1,
            weight_decay: 0.01,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size: must be positive".into()));
        }
        for (name, lr) in [("values_lr", self.values_lr), ("decoder_lr", self.decoder_lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name}: {lr} is not a valid rate")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout: {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay: {} is not valid",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Read-only inference.
pub trait Predictor: Sync {
    /// Predicted global class. Multi-head models need `task_id`, single-head
    /// models reject it.
    fn predict(&self, record: &EmbeddingRecord, task_id: Option<u32>) -> Result<u32>;
}

impl<F> Predictor for F
where
    F: Fn(&EmbeddingRecord, Option<u32>) -> Result<u32> + Sync,
{
    fn predict(&self, record: &EmbeddingRecord, task_id: Option<u32>) -> Result<u32> {
        self(record, task_id)
    }
}

/// A continual learner driven task by task by the harness.
pub trait Learner: Predictor {
    fn method(&self) -> &str;

    fn epochs(&self) -> usize;

    /// Called once before the first task.
    fn prepare(&mut self, _scenario: &ScenarioSpec) -> Result<()> {
        Ok(())
    }

    /// Called before training on `task`; not part of the epoch timings.
    fn begin_task(&mut self, _scenario: &ScenarioSpec, _task: &TaskSet) -> Result<()> {
        Ok(())
    }

    /// One pass over the task's training split; returns the mean loss.
    fn train_epoch(&mut self, task: &TaskSet, epoch: usize) -> Result<f64>;

    fn end_task(&mut self, _task: &TaskSet) -> Result<()> {
        Ok(())
    }
}

// Stream tags for the counter-addressed RNG.
pub(crate) const STREAM_ORDER: u64 = 1 << 40;
pub(crate) const STREAM_DROPOUT: u64 = 2 << 40;
pub(crate) const STREAM_INIT: u64 = 3 << 40;
pub(crate) const STREAM_REPLAY: u64 = 4 << 40;

/// Seeded permutation of `0..n` for epoch `epoch` of task `task_id`.
pub(crate) fn epoch_order(seed: u64, task_id: u32, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let counter = STREAM_ORDER | (u64::from(task_id) << 20) | epoch as u64;
    order.shuffle(&mut RngStream::new(seed, counter));
    order
}
