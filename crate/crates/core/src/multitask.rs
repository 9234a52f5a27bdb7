//! Task registry and two-level (task, then dataset) batch sampling.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::contrastive::LabeledExample;
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::heads::HeadType;
use crate::rng::Rng;

pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub name: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub modalities: Vec<Modality>,
    pub head_type: HeadType,
    pub num_classes: usize,
    pub datasets: Vec<DatasetRef>,
    /// Unnormalized sampling weight; `None` means total dataset size.
    pub weight: Option<f64>,
    /// Filled in by the registry.
    pub sampling_prob: f64,
    /// Natural-language class descriptions as token ids, when the task has them.
    pub class_names: Vec<Vec<u32>>,
}

impl TaskSpec {
    pub fn new(
        task_id: usize,
        name: impl Into<String>,
        modalities: Vec<Modality>,
        head_type: HeadType,
        num_classes: usize,
        datasets: Vec<DatasetRef>,
    ) -> Self {
        TaskSpec {
            task_id,
            name: name.into(),
            modalities,
            head_type,
            num_classes,
            datasets,
            weight: None,
            sampling_prob: 0.0,
            class_names: Vec::new(),
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = Some(weight);
        self
    }

    pub fn uses(&self, modality: Modality) -> bool {
        self.modalities.contains(&modality)
    }

    fn raw_weight(&self) -> f64 {
        self.weight
            .unwrap_or_else(|| self.datasets.iter().map(|d| d.size).sum::<usize>() as f64)
    }

    fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::EmptyDatasets(self.name.clone()));
        }
        if self.modalities.is_empty() {
            return Err(Error::InvalidConfig(alloc::format!("task {} declares no modality", self.name)));
        }
        if self.head_type == HeadType::Logistic && self.num_classes != 2 {
            return Err(Error::InvalidConfig(alloc::format!(
                "task {} has a logistic head but {} classes",
                self.name, self.num_classes
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(alloc::format!("task {} needs at least two classes", self.name)));
        }
        let w = self.raw_weight();
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidConfig(alloc::format!("task {} has weight {w}", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskRegistry {
    tasks: Vec<TaskSpec>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: TaskSpec) -> Result<()> {
        spec.validate()?;
        if self.tasks.iter().any(|t| t.task_id == spec.task_id) {
            return Err(Error::DuplicateTask(spec.name));
        }
        self.tasks.push(spec);
        self.renormalize()
    }

    fn renormalize(&mut self) -> Result<()> {
        let total: f64 = self.tasks.iter().map(TaskSpec::raw_weight).sum();
        if total <= 0.0 {
            return Err(Error::InvalidConfig("task weights sum to zero".into()));
        }
        for t in &mut self.tasks {
            t.sampling_prob = t.raw_weight() / total;
        }
        Ok(())
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, task_id: usize) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or(Error::UnknownId { kind: "task", id: task_id })
    }

    /// Categorical draw over tasks by sampling probability.
    pub fn sample_task(&self, rng: &mut Rng) -> Result<usize> {
        if self.tasks.is_empty() {
            return Err(Error::EmptyRegistry);
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for t in &self.tasks {
            acc += t.sampling_prob;
            if u < acc {
                return Ok(t.task_id);
            }
        }
        // Rounding left `acc` just below 1; fall back to the last task that can be drawn.
        let last = self.tasks.iter().rev().find(|t| t.sampling_prob > 0.0).unwrap_or(&self.tasks[0]);
        Ok(last.task_id)
    }
}

/// Uniform draw over a task's datasets; returns the dataset index.
pub fn sample_dataset(task: &TaskSpec, rng: &mut Rng) -> usize {
    rng.random_range(0..task.datasets.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub task_id: usize,
    pub dataset_id: usize,
    pub examples: Vec<LabeledExample>,
}

/// Draws `batch_size` examples, with replacement only when the dataset is too small.
pub fn fill_batch(
    task_id: usize,
    dataset_id: usize,
    dataset: &[LabeledExample],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let examples = if dataset.len() < batch_size {
        (0..batch_size)
            .map(|_| dataset[rng.random_range(0..dataset.len())].clone())
            .collect()
    } else {
        index::sample(rng, dataset.len(), batch_size)
            .into_iter()
            .map(|i| dataset[i].clone())
            .collect()
    };
    Ok(Batch { task_id, dataset_id, examples })
}

/// Pearson χ² statistic of observed counts against expected probabilities.
pub fn chi_square_statistic(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&c, &p)| {
            let e = n as f64 * p;
            (c as f64 - e) * (c as f64 - e) / e
        })
        .sum()
}
