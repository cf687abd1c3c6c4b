//! Scenario construction from a dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;

use super::format::{EmbeddingRecord, RecordSet};
use super::manifest::Dataset;
use crate::error::{Error, Result};
use crate::harness::{ScenarioKind, ScenarioSpec, TaskSet};
use crate::numkit::RngStream;

/// How records are grouped into tasks.
#[derive(Clone, Debug, PartialEq)]
pub enum Grouping {
    /// 2 classes per task for CIL, 1 for single-head CIL, 1 domain per task
    /// for DIL, 1 task type per task for TIL.
    Default,
    ClassesPerTask(usize),
    DomainsPerTask(usize),
    /// Explicit groups of class IDs (CIL), domain IDs (DIL) or task types
    /// (TIL).
    Explicit(Vec<Vec<u32>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRequest {
    pub kind: ScenarioKind,
    pub grouping: Grouping,
    pub seed: u64,
    /// Shuffle the task order with `seed`; otherwise keep ascending order.
    pub shuffle: bool,
}

impl ScenarioRequest {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        ScenarioRequest {
            kind,
            grouping: Grouping::Default,
            seed,
            shuffle: true,
        }
    }

    pub fn grouping(mut self, grouping: Grouping) -> Self {
        self.grouping = grouping;
        self
    }
}

fn chunk(ids: Vec<u32>, per: usize) -> Result<Vec<Vec<u32>>> {
    if per == 0 {
        return Err(Error::InvalidConfig("group size must be positive".into()));
    }
    Ok(ids.chunks(per).map(<[u32]>::to_vec).collect())
}

fn check_groups(groups: &[Vec<u32>], universe: &BTreeSet<u32>, what: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for g in groups {
        if g.is_empty() {
            return Err(Error::InvalidScenario(format!("empty {what} group")));
        }
        for &x in g {
            if !seen.insert(x) {
                return Err(Error::InvalidScenario(format!(
                    "{what} {x} assigned to more than one task"
                )));
            }
        }
    }
    if let Some(missing) = universe.difference(&seen).next() {
        return Err(Error::InvalidScenario(format!(
            "{what} {missing} is not assigned to any task"
        )));
    }
    Ok(())
}

/// Builds an ordered task sequence.
///
/// Class-incremental kinds partition the label set, domain-incremental
/// partitions domain IDs and task-type-incremental groups by the records'
/// `task_id`. Task-type labels are remapped to a dense global label space
/// so that label IDs never collide across task types.
pub fn build_scenario(dataset: &Dataset, req: &ScenarioRequest) -> Result<ScenarioSpec> {
    let (t, h, cls_flag) = dataset.layout();
    for set in [&dataset.val, &dataset.test] {
        if !set.is_empty() && (set.t, set.h, set.cls_flag) != (t, h, cls_flag) {
            return Err(Error::InvalidScenario("splits disagree on layout".into()));
        }
    }
    let all = || {
        dataset
            .train
            .records
            .iter()
            .chain(&dataset.val.records)
            .chain(&dataset.test.records)
    };

    // TIL: dense remap of (task type, label) onto global labels.
    let mut til_map: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    if req.kind == ScenarioKind::Til {
        let pairs: BTreeSet<(u32, u32)> = all().map(|r| (r.task_id, r.label)).collect();
        for (i, p) in pairs.into_iter().enumerate() {
            til_map.insert(p, i as u32);
        }
    }
    let relabel = |r: &EmbeddingRecord| -> Arc<EmbeddingRecord> {
        if req.kind == ScenarioKind::Til {
            let mut r = r.clone();
            r.label = til_map[&(r.task_id, r.label)];
            Arc::new(r)
        } else {
            Arc::new(r.clone())
        }
    };

    // key of a record under this scenario's grouping axis
    let axis_key = |r: &EmbeddingRecord| -> u32 {
        match req.kind {
            ScenarioKind::Cil | ScenarioKind::SingleHeadCil => r.label,
            ScenarioKind::Dil => r.domain_id,
            ScenarioKind::Til => r.task_id,
        }
    };
    let universe: BTreeSet<u32> = dataset.train.records.iter().map(axis_key).collect();
    if universe.is_empty() {
        return Err(Error::InvalidScenario("training split is empty".into()));
    }
    let what = match req.kind {
        ScenarioKind::Cil | ScenarioKind::SingleHeadCil => "class",
        ScenarioKind::Dil => "domain",
        ScenarioKind::Til => "task type",
    };

    let mut rng = RngStream::new(req.seed, 0x5ce7a710);
    let mut groups = match (&req.grouping, req.kind) {
        (Grouping::Explicit(g), _) => {
            let mut g = g.clone();
            if req.shuffle {
                g.shuffle(&mut rng);
            }
            g
        }
        (Grouping::ClassesPerTask(n), ScenarioKind::Cil | ScenarioKind::SingleHeadCil)
        | (Grouping::DomainsPerTask(n), ScenarioKind::Dil) => {
            let mut ids: Vec<u32> = universe.iter().copied().collect();
            if req.shuffle {
                ids.shuffle(&mut rng);
            }
            chunk(ids, *n)?
        }
        (Grouping::Default, kind) => {
            let per = match kind {
                ScenarioKind::Cil => 2,
                _ => 1,
            };
            let mut ids: Vec<u32> = universe.iter().copied().collect();
            if req.shuffle {
                ids.shuffle(&mut rng);
            }
            chunk(ids, per)?
        }
        (g, kind) => {
            return Err(Error::InvalidConfig(format!(
                "grouping {g:?} does not apply to scenario {kind}"
            )))
        }
    };
    check_groups(&groups, &universe, what)?;
    for g in &mut groups {
        g.sort_unstable();
    }

    let mut tasks = Vec::with_capacity(groups.len());
    for (index, group) in groups.iter().enumerate() {
        let members: BTreeSet<u32> = group.iter().copied().collect();
        let pick = |set: &RecordSet| -> Vec<Arc<EmbeddingRecord>> {
            set.records
                .iter()
                .filter(|r| members.contains(&axis_key(r)))
                .map(relabel)
                .collect()
        };
        let train = pick(&dataset.train);
        let val = pick(&dataset.val);
        let test = pick(&dataset.test);
        let classes: BTreeSet<u32> = train.iter().chain(&val).chain(&test).map(|r| r.label).collect();
        let domains: BTreeSet<u32> = train.iter().chain(&val).chain(&test).map(|r| r.domain_id).collect();
        let task_type = match req.kind {
            ScenarioKind::Til => group[0],
            _ => 0,
        };
        if req.kind == ScenarioKind::Til && group.len() != 1 {
            return Err(Error::InvalidScenario(
                "each TIL task must hold exactly one task type".into(),
            ));
        }
        tasks.push(TaskSet {
            task_id: index as u32,
            train,
            val,
            test,
            classes,
            domains,
            task_type,
        });
    }

    let num_classes = match req.kind {
        ScenarioKind::Til => til_map.len(),
        _ => dataset.num_classes(),
    };
    let full_test = (req.kind == ScenarioKind::SingleHeadCil).then(|| {
        dataset
            .test
            .records
            .iter()
            .map(|r| Arc::new(r.clone()))
            .collect()
    });
    let spec = ScenarioSpec {
        kind: req.kind,
        tasks,
        seed: req.seed,
        full_test,
        num_classes,
        t,
        h,
        cls_flag,
    };
    spec.validate()?;
    Ok(spec)
}

/// Keeps at most `per_class` records of each class, chosen by a seeded
/// shuffle; survivors keep their original relative order.
pub fn subsample_per_class(set: &RecordSet, per_class: usize, seed: u64) -> RecordSet {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in set.records.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let mut rng = RngStream::new(seed, 0x10f5);
    let mut keep = BTreeSet::new();
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        keep.extend(idx.iter().take(per_class).copied());
    }
    RecordSet {
        t: set.t,
        h: set.h,
        cls_flag: set.cls_flag,
        records: keep.into_iter().map(|i| set.records[i].clone()).collect(),
    }
}
