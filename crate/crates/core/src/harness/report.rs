//! Structured run records, one JSON object per line.
//!
//! Metric records hold only quantities that are a pure function of the
//! configuration and seed, so two identical runs write identical files;
//! wall-clock timings go to their own records.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::mean_std;
use super::runner::RunOutcome;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub seed: u64,
    pub scenario: String,
    pub method: String,
    /// `None` marks the run summary (headline accuracy, mean macro-F1, BWT).
    pub task_id: Option<u32>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub bwt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub seed: u64,
    pub scenario: String,
    pub method: String,
    pub task_id: Option<u32>,
    pub epochs: usize,
    pub epoch_time_mean: f64,
    pub epoch_time_std: f64,
}

impl RunOutcome {
    /// One record per task (final-row scores) plus a summary record.
    pub fn metric_records(&self, seed: u64, method: &str) -> Vec<MetricRecord> {
        let scenario = self.kind.name().to_string();
        let mut out: Vec<MetricRecord> = self
            .final_scores
            .iter()
            .map(|s| MetricRecord {
                seed,
                scenario: scenario.clone(),
                method: method.to_string(),
                task_id: Some(s.task_id),
                accuracy: s.accuracy,
                macro_f1: s.macro_f1,
                bwt: None,
            })
            .collect();
        out.push(MetricRecord {
            seed,
            scenario,
            method: method.to_string(),
            task_id: None,
            accuracy: self.accuracy(),
            macro_f1: self.macro_f1(),
            bwt: self.bwt(),
        });
        out
    }

    pub fn timing_records(&self, seed: u64, method: &str) -> Vec<TimingRecord> {
        let scenario = self.kind.name().to_string();
        let mut out: Vec<TimingRecord> = self
            .timings
            .iter()
            .map(|t| {
                let (m, s) = mean_std(&t.epoch_seconds);
                TimingRecord {
                    seed,
                    scenario: scenario.clone(),
                    method: method.to_string(),
                    task_id: Some(t.task_id),
                    epochs: t.epoch_seconds.len(),
                    epoch_time_mean: m,
                    epoch_time_std: s,
                }
            })
            .collect();
        let (m, s) = self.epoch_time();
        out.push(TimingRecord {
            seed,
            scenario,
            method: method.to_string(),
            task_id: None,
            epochs: self.timings.iter().map(|t| t.epoch_seconds.len()).sum(),
            epoch_time_mean: m,
            epoch_time_std: s,
        });
        out
    }
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::InvalidInput(format!("record on line {}: {e}", i + 1)))
        })
        .collect()
}

/// Two-column plot data: increment index (1-based) and accuracy.
pub fn curve_table(curve: &[f64]) -> String {
    let mut out = String::new();
    for (i, a) in curve.iter().enumerate() {
        let _ = writeln!(out, "{} {a:?}", i + 1);
    }
    out
}

pub fn parse_curve_table(text: &str) -> Result<Vec<(usize, f64)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            let bad = || Error::InvalidInput(format!("bad plot-data line {l:?}"));
            let i = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let a = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            Ok((i, a))
        })
        .collect()
}
