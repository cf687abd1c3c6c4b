use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embed_store::EmbeddingRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "dil")]
    Dil,
    #[serde(rename = "cil")]
    Cil,
    #[serde(rename = "til")]
    Til,
    #[serde(rename = "single-head-cil")]
    SingleHeadCil,
}

impl ScenarioKind {
    /// Multi-head scenarios get a decoder (or class mask) per task and are
    /// given the task ID at test time.
    pub fn multi_head(self) -> bool {
        matches!(self, ScenarioKind::Cil | ScenarioKind::Til)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Dil => "dil",
            ScenarioKind::Cil => "cil",
            ScenarioKind::Til => "til",
            ScenarioKind::SingleHeadCil => "single-head-cil",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dil" => Ok(ScenarioKind::Dil),
            "cil" => Ok(ScenarioKind::Cil),
            "til" => Ok(ScenarioKind::Til),
            "single-head-cil" | "single_head_cil" | "shcil" => Ok(ScenarioKind::SingleHeadCil),
            other => Err(Error::InvalidConfig(format!("unknown scenario {other:?}"))),
        }
    }
}

/// One task of a scenario.
#[derive(Clone, Debug)]
pub struct TaskSet {
    /// Position in the (possibly shuffled) task sequence; also the routing
    /// key for multi-head decoding.
    pub task_id: u32,
    pub train: Vec<Arc<EmbeddingRecord>>,
    pub val: Vec<Arc<EmbeddingRecord>>,
    pub test: Vec<Arc<EmbeddingRecord>>,
    pub classes: BTreeSet<u32>,
    pub domains: BTreeSet<u32>,
    pub task_type: u32,
}

/// Ordered task list plus what is needed to evaluate it.
#[derive(Clone, Debug)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub tasks: Vec<TaskSet>,
    pub seed: u64,
    /// Whole test split, for progressive single-head evaluation.
    pub full_test: Option<Vec<Arc<EmbeddingRecord>>>,
    pub num_classes: usize,
    pub t: usize,
    pub h: usize,
    pub cls_flag: bool,
}

impl ScenarioSpec {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of all tasks up to and including `task_index`.
    pub fn seen_classes(&self, task_index: usize) -> BTreeSet<u32> {
        self.tasks[..=task_index]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidScenario("scenario has no tasks".into()));
        }
        for (i, a) in self.tasks.iter().enumerate() {
            for b in &self.tasks[i + 1..] {
                match self.kind {
                    ScenarioKind::Cil | ScenarioKind::SingleHeadCil => {
                        if let Some(c) = a.classes.intersection(&b.classes).next() {
                            return Err(Error::InvalidScenario(format!(
                                "class {c} appears in tasks {} and {}",
                                a.task_id, b.task_id
                            )));
                        }
                    }
                    ScenarioKind::Dil => {
                        if let Some(d) = a.domains.intersection(&b.domains).next() {
                            return Err(Error::InvalidScenario(format!(
                                "domain {d} appears in tasks {} and {}",
                                a.task_id, b.task_id
                            )));
                        }
                    }
                    ScenarioKind::Til => {
                        if a.task_type == b.task_type {
                            return Err(Error::InvalidScenario(format!(
                                "task type {} repeats in tasks {} and {}",
                                a.task_type, a.task_id, b.task_id
                            )));
                        }
                    }
                }
            }
        }
        for task in &self.tasks {
            let mut seen = HashSet::new();
            for r in task.train.iter().chain(&task.val).chain(&task.test) {
                if !seen.insert(r.id) {
                    return Err(Error::InvalidScenario(format!(
                        "sample {:#x} appears twice in task {}",
                        r.id, task.task_id
                    )));
                }
                if !task.classes.contains(&r.label) {
                    return Err(Error::InvalidScenario(format!(
                        "task {} holds label {} outside its class set",
                        task.task_id, r.label
                    )));
                }
                if r.label as usize >= self.num_classes {
                    return Err(Error::InvalidScenario(format!(
                        "label {} >= class count {}",
                        r.label, self.num_classes
                    )));
                }
            }
        }
        if self.kind == ScenarioKind::SingleHeadCil && self.full_test.is_none() {
            return Err(Error::InvalidScenario(
                "single-head CIL needs the full test set".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parsing() {
        for k in [
            ScenarioKind::Dil,
            ScenarioKind::Cil,
            ScenarioKind::Til,
            ScenarioKind::SingleHeadCil,
        ] {
            assert_eq!(k.name().parse::<ScenarioKind>().unwrap(), k);
        }
        assert!("xil".parse::<ScenarioKind>().is_err());
        assert!(ScenarioKind::Cil.multi_head());
        assert!(!ScenarioKind::SingleHeadCil.multi_head());
    }
}
