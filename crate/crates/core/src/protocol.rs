//! Class-incremental task sequences and per-step dataset slices.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{filter_annotations, ClassId, SceneSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMode {
    /// Each image belongs to exactly one step.
    Disjoint,
    /// An image appears in every step whose classes it contains.
    Overlap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSpec {
    pub ordering: Vec<ClassId>,
    pub initial: usize,
    pub increment: usize,
    pub overlap_mode: OverlapMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub step: usize,
    pub new_classes: Vec<ClassId>,
    pub seen_classes: Vec<ClassId>,
}

impl TaskSpec {
    pub fn new_set(&self) -> BTreeSet<ClassId> {
        self.new_classes.iter().copied().collect()
    }

    /// Classes seen before this step.
    pub fn old_classes(&self) -> &[ClassId] {
        &self.seen_classes[..self.seen_classes.len() - self.new_classes.len()]
    }
}

/// Ascending ids `1..=count`, shuffled when a seed is given.
pub fn class_ordering(count: usize, seed: Option<u64>) -> Vec<ClassId> {
    let mut ids: Vec<ClassId> = (1..=count as ClassId).collect();
    if let Some(seed) = seed {
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    ids
}

pub fn build_protocol(spec: &ProtocolSpec) -> Result<Vec<TaskSpec>> {
    let total = spec.ordering.len();
    let unique: BTreeSet<_> = spec.ordering.iter().collect();
    if unique.len() != total {
        return Err(Error::Config("class ordering contains duplicates".into()));
    }
    if spec.initial == 0 || spec.initial > total {
        return Err(Error::Config(format!("initial step size {} invalid for {total} classes", spec.initial)));
    }
    let rest = total - spec.initial;
    if rest > 0 && (spec.increment == 0 || !rest.is_multiple_of(spec.increment)) {
        return Err(Error::Config(format!(
            "{rest} remaining classes not divisible into increments of {}",
            spec.increment
        )));
    }
    let mut tasks = vec![TaskSpec {
        step: 0,
        new_classes: spec.ordering[..spec.initial].to_vec(),
        seen_classes: spec.ordering[..spec.initial].to_vec(),
    }];
    let mut end = spec.initial;
    while end < total {
        let start = end;
        end += spec.increment;
        tasks.push(TaskSpec {
            step: tasks.len(),
            new_classes: spec.ordering[start..end].to_vec(),
            seen_classes: spec.ordering[..end].to_vec(),
        });
    }
    Ok(tasks)
}

/// Samples seen at `task`, annotated for that step's new classes only.
pub fn slice_dataset(samples: &[SceneSample], task: &TaskSpec, mode: OverlapMode) -> Vec<SceneSample> {
    let current = task.new_set();
    samples
        .iter()
        .filter(|s| {
            let present = s.classes();
            match mode {
                OverlapMode::Disjoint => present.first().is_some_and(|c| current.contains(c)),
                OverlapMode::Overlap => present.iter().any(|c| current.contains(c)),
            }
        })
        .map(|s| filter_annotations(s, &current))
        .collect()
}
