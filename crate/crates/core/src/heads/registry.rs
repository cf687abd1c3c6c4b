use std::collections::BTreeMap;

use super::decoder::ParametricDecoder;
use crate::error::{Error, Result};
use crate::numkit::softmax;
use crate::Float;

/// Decoder or class mask for one task (or for the single shared head).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    /// Global class IDs this head scores, ascending. A parametric decoder's
    /// output column `i` scores `classes[i]`.
    pub classes: Vec<u32>,
    pub decoder: Option<ParametricDecoder>,
}

/// Logits restricted to the classes a head may predict.
#[derive(Clone, Debug, PartialEq)]
pub struct ScopedLogits {
    pub classes: Vec<u32>,
    pub logits: Vec<Float>,
}

impl ScopedLogits {
    /// Global class with the largest logit; ties go to the first.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &x) in self.logits.iter().enumerate() {
            if x > self.logits[best] {
                best = i;
            }
        }
        self.classes[best]
    }

    /// Position of a global class among the scoped logits.
    pub fn local_index(&self, class: u32) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    /// Full-width logits with masked classes at −∞.
    pub fn to_global(&self, n_classes: usize) -> Vec<Float> {
        let mut out = vec![Float::NEG_INFINITY; n_classes];
        for (&c, &x) in self.classes.iter().zip(&self.logits) {
            out[c as usize] = x;
        }
        out
    }

    /// Softmax over the scoped classes, zero mass elsewhere.
    pub fn global_probabilities(&self, n_classes: usize) -> Result<Vec<Float>> {
        let p = softmax(&self.logits)?;
        let mut out = vec![0.0; n_classes];
        for (&c, &x) in self.classes.iter().zip(&p) {
            out[c as usize] = x;
        }
        Ok(out)
    }
}

/// Maps task IDs to decoders (parametric) or class masks (non-parametric).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadRegistry {
    single_head: bool,
    heads: BTreeMap<u32, TaskHead>,
}

const SHARED: u32 = u32::MAX;

impl HeadRegistry {
    pub fn single(head: TaskHead) -> Self {
        HeadRegistry {
            single_head: true,
            heads: BTreeMap::from([(SHARED, head)]),
        }
    }

    pub fn multi() -> Self {
        HeadRegistry {
            single_head: false,
            heads: BTreeMap::new(),
        }
    }

    pub fn is_single_head(&self) -> bool {
        self.single_head
    }

    pub fn register(&mut self, task_id: u32, mut head: TaskHead) -> Result<()> {
        if self.single_head {
            return Err(Error::Routing(
                "single-head registry does not take per-task heads".into(),
            ));
        }
        head.classes.sort_unstable();
        head.classes.dedup();
        self.heads.insert(task_id, head);
        Ok(())
    }

    pub fn contains(&self, task_id: u32) -> bool {
        !self.single_head && self.heads.contains_key(&task_id)
    }

    pub fn task_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.heads.keys().copied().filter(|&k| k != SHARED)
    }

    fn key(&self, task_id: Option<u32>) -> Result<u32> {
        match (self.single_head, task_id) {
            (true, None) => Ok(SHARED),
            (true, Some(t)) => Err(Error::Routing(format!(
                "task ID {t} supplied to a single-head model"
            ))),
            (false, None) => Err(Error::Routing("multi-head model needs a task ID".into())),
            (false, Some(t)) if self.heads.contains_key(&t) => Ok(t),
            (false, Some(t)) => Err(Error::Routing(format!("unknown task ID {t}"))),
        }
    }

    pub fn head(&self, task_id: Option<u32>) -> Result<&TaskHead> {
        let k = self.key(task_id)?;
        Ok(&self.heads[&k])
    }

    pub fn head_mut(&mut self, task_id: Option<u32>) -> Result<&mut TaskHead> {
        let k = self.key(task_id)?;
        Ok(self.heads.get_mut(&k).expect("key checked"))
    }

    pub fn heads(&self) -> impl Iterator<Item = (Option<u32>, &TaskHead)> {
        self.heads
            .iter()
            .map(|(&k, h)| ((k != SHARED).then_some(k), h))
    }
}

/// Restricts global logits to the classes of the routed head. Used for the
/// non-parametric decoder and the linear-probe baselines, whose outputs
/// span the global class set.
pub fn route(global_logits: &[Float], task_id: Option<u32>, registry: &HeadRegistry) -> Result<ScopedLogits> {
    let head = registry.head(task_id)?;
    let logits = head
        .classes
        .iter()
        .map(|&c| {
            global_logits.get(c as usize).copied().ok_or(Error::Index {
                index: c as usize,
                len: global_logits.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScopedLogits {
        classes: head.classes.clone(),
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(classes: &[u32]) -> TaskHead {
        TaskHead {
            classes: classes.to_vec(),
            decoder: None,
        }
    }

    #[test]
    fn single_head_rejects_task_id() {
        let r = HeadRegistry::single(mask(&[0, 1, 2]));
        assert!(matches!(route(&[0.0; 3], Some(0), &r), Err(Error::Routing(_))));
        assert_eq!(route(&[0.0, 3.0, 1.0], None, &r).unwrap().argmax(), 1);
    }

    #[test]
    fn masking_forces_task_classes() {
        let mut r = HeadRegistry::multi();
        r.register(0, mask(&[0, 1])).unwrap();
        r.register(1, mask(&[2, 3])).unwrap();
        let scoped = route(&[5.0, 1.0, 9.0, 9.0], Some(0), &r).unwrap();
        assert_eq!(scoped.argmax(), 0);
        let p = scoped.global_probabilities(4).unwrap();
        assert_eq!(&p[2..], &[0.0, 0.0]);
        let g = scoped.to_global(4);
        assert!(g[2] == Float::NEG_INFINITY && g[0] == 5.0);
    }

    #[test]
    fn two_class_tasks_are_binary() {
        let mut r = HeadRegistry::multi();
        for t in 0..5u32 {
            r.register(t, mask(&[2 * t, 2 * t + 1])).unwrap();
        }
        for t in 0..5u32 {
            assert_eq!(route(&[0.0; 10], Some(t), &r).unwrap().logits.len(), 2);
        }
    }

    #[test]
    fn routing_errors() {
        let mut r = HeadRegistry::multi();
        r.register(3, mask(&[0])).unwrap();
        assert!(matches!(route(&[0.0], None, &r), Err(Error::Routing(_))));
        assert!(matches!(route(&[0.0], Some(4), &r), Err(Error::Routing(_))));
        assert!(HeadRegistry::single(mask(&[0])).register(0, mask(&[0])).is_err());
    }
}
