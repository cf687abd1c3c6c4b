use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::learner::{Learner, Predictor};
use super::metrics::{accuracy, bwt, macro_f1, mean_std, ResultMatrix};
use super::scenario::{ScenarioKind, ScenarioSpec, TaskSet};
use crate::embed_store::EmbeddingRecord;
use crate::error::{Error, Result};

/// Per-task training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTiming {
    pub task_id: u32,
    /// Wall-clock seconds per epoch.
    pub epoch_seconds: Vec<f64>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: u32,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub kind: ScenarioKind,
    pub r: ResultMatrix,
    /// Scores after the final increment, in task order.
    pub final_scores: Vec<TaskScore>,
    /// Full-test accuracy after each increment (single-head CIL only).
    pub curve: Option<Vec<f64>>,
    pub timings: Vec<TaskTiming>,
}

impl RunOutcome {
    /// Mean of the final row of R.
    pub fn accuracy(&self) -> f64 {
        self.r.final_mean().unwrap_or(0.0)
    }

    pub fn macro_f1(&self) -> f64 {
        let f: Vec<f64> = self.final_scores.iter().map(|s| s.macro_f1).collect();
        mean_std(&f).0
    }

    /// `None` for single-task runs.
    pub fn bwt(&self) -> Option<f64> {
        bwt(&self.r).ok()
    }

    /// Mean and sample stdev of every epoch's wall-clock time.
    pub fn epoch_time(&self) -> (f64, f64) {
        let all: Vec<f64> = self.timings.iter().flat_map(|t| t.epoch_seconds.iter().copied()).collect();
        mean_std(&all)
    }
}

/// Routing key used at test time for a task.
fn route_key(kind: ScenarioKind, task: &TaskSet) -> Option<u32> {
    kind.multi_head().then_some(task.task_id)
}

fn predictions<P: Predictor + ?Sized>(
    model: &P,
    records: &[Arc<EmbeddingRecord>],
    task_id: Option<u32>,
) -> Result<(Vec<u32>, Vec<u32>)> {
    // read-only: fan out over worker threads, order preserved by collect
    let preds = records
        .par_iter()
        .map(|r| model.predict(r, task_id))
        .collect::<Result<Vec<_>>>()?;
    let labels = records.iter().map(|r| r.label).collect();
    Ok((preds, labels))
}

/// Accuracy and macro-F1 on one task's test split.
pub fn evaluate_task<P: Predictor + ?Sized>(model: &P, kind: ScenarioKind, task: &TaskSet) -> Result<TaskScore> {
    let (p, l) = predictions(model, &task.test, route_key(kind, task))?;
    Ok(TaskScore {
        task_id: task.task_id,
        accuracy: accuracy(&p, &l)?,
        macro_f1: macro_f1(&p, &l)?,
    })
}

/// Accuracy on the whole single-head test set.
pub fn full_test_accuracy<P: Predictor + ?Sized>(spec: &ScenarioSpec, model: &P) -> Result<f64> {
    let full = spec
        .full_test
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("scenario has no full test set".into()))?;
    let (p, l) = predictions(model, full, None)?;
    accuracy(&p, &l)
}

/// One full-test accuracy per model state (one state per increment).
pub fn progressive_eval<P: Predictor>(spec: &ScenarioSpec, states: &[P]) -> Result<Vec<f64>> {
    if spec.kind != ScenarioKind::SingleHeadCil {
        return Err(Error::InvalidConfig(format!(
            "progressive evaluation needs a single-head CIL scenario, got {}",
            spec.kind
        )));
    }
    states.iter().map(|s| full_test_accuracy(spec, s)).collect()
}

/// Runs the learner's epochs on one task; keys must already be frozen.
pub fn train_task<L: Learner + ?Sized>(learner: &mut L, task: &TaskSet) -> Result<TaskTiming> {
    let mut timing = TaskTiming {
        task_id: task.task_id,
        epoch_seconds: Vec::new(),
        losses: Vec::new(),
    };
    for epoch in 0..learner.epochs() {
        let start = Instant::now();
        let loss = learner.train_epoch(task, epoch)?;
        timing.epoch_seconds.push(start.elapsed().as_secs_f64());
        timing.losses.push(loss);
        if !loss.is_finite() {
            return Err(Error::InvalidState(format!(
                "non-finite loss in task {} epoch {epoch}",
                task.task_id
            )));
        }
    }
    Ok(timing)
}

/// Trains on the tasks in order. After task `i`, row `i` of R is filled
/// by evaluating tasks `0..=i`; single-head CIL also records the
/// full-test accuracy per increment.
pub fn run_scenario<L: Learner + ?Sized>(spec: &ScenarioSpec, learner: &mut L) -> Result<RunOutcome> {
    spec.validate()?;
    let t = spec.num_tasks();
    let single = spec.kind == ScenarioKind::SingleHeadCil;
    if single && spec.full_test.is_none() {
        return Err(Error::InvalidConfig("single-head CIL needs a full test set".into()));
    }
    learner.prepare(spec)?;
    let mut r = ResultMatrix::new(t);
    let mut curve = single.then(Vec::new);
    let mut timings = Vec::with_capacity(t);
    let mut final_scores = Vec::new();
    for (i, task) in spec.tasks.iter().enumerate() {
        learner.begin_task(spec, task)?;
        timings.push(train_task(learner, task)?);
        learner.end_task(task)?;
        for (j, seen) in spec.tasks[..=i].iter().enumerate() {
            let score = evaluate_task(&*learner, spec.kind, seen)?;
            r.set(i, j, score.accuracy)?;
            if i + 1 == t {
                final_scores.push(score);
            }
        }
        if let Some(c) = curve.as_mut() {
            c.push(full_test_accuracy(spec, &*learner)?);
        }
    }
    Ok(RunOutcome {
        kind: spec.kind,
        r,
        final_scores,
        curve,
        timings,
    })
}
