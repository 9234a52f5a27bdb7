//! Synthetic suites built from a run config, and pool export/import.

use std::io::{BufRead, Write};

use fm3_core::contrastive::LabeledExample;
use fm3_core::multitask::{DatasetRef, TaskRegistry, TaskSpec};
use fm3_core::synthdata::{self, generate_task, SynthTask, TaskKind};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub kind: TaskKind,
    /// One generated pool pair per configured dataset.
    pub datasets: Vec<SynthTask>,
}

impl TaskData {
    pub fn train(&self) -> Vec<LabeledExample> {
        self.datasets.iter().flat_map(|d| synthdata::examples(&d.train)).collect()
    }

    pub fn eval(&self) -> Vec<LabeledExample> {
        self.datasets.iter().flat_map(|d| synthdata::examples(&d.eval)).collect()
    }

    pub fn dataset_pools(&self) -> Vec<Vec<LabeledExample>> {
        self.datasets.iter().map(|d| synthdata::examples(&d.train)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub tasks: Vec<TaskData>,
    pub registry: TaskRegistry,
}

impl Suite {
    pub fn build(cfg: &RunConfig) -> Result<Suite> {
        cfg.validate()?;
        let mut registry = TaskRegistry::new();
        let mut tasks = Vec::with_capacity(cfg.tasks.len());
        for (task_id, t) in cfg.tasks.iter().enumerate() {
            let datasets = (0..t.datasets.len())
                .map(|d| generate_task(task_id, &t.synth_config(d, cfg.lexicon_seed)))
                .collect::<fm3_core::Result<Vec<_>>>()?;
            let refs = t
                .datasets
                .iter()
                .zip(&datasets)
                .map(|(d, g)| DatasetRef { name: d.name.clone(), size: g.train.len() })
                .collect();
            let mut spec = TaskSpec::new(task_id, t.name.clone(), t.modalities.clone(), t.head, t.classes, refs);
            spec.weight = t.weight;
            spec.class_names = datasets[0].spec.class_names.clone();
            registry.register(spec)?;
            let spec = registry.get(task_id)?.clone();
            tasks.push(TaskData { spec, kind: t.kind, datasets });
        }
        Ok(Suite { tasks, registry })
    }

    pub fn task_by_name(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.spec.name == name)
            .ok_or_else(|| Error::Config(format!("no task named {name:?}")))
    }

    /// `[task][dataset]` train pools, the layout the joint stage expects.
    pub fn joint_pools(&self) -> Vec<Vec<Vec<LabeledExample>>> {
        self.tasks.iter().map(TaskData::dataset_pools).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// One exported example per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolRecord {
    pub id: u64,
    pub task: String,
    pub dataset: String,
    pub split: Split,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<Vec<f64>>,
}

impl PoolRecord {
    pub fn example(&self, task_id: usize) -> LabeledExample {
        LabeledExample {
            example_id: self.id,
            task_id,
            text: self.text.clone(),
            image: self.image.clone(),
            label: self.label,
        }
    }
}

pub fn pool_records(suite: &Suite) -> Vec<PoolRecord> {
    let mut out = Vec::new();
    for t in &suite.tasks {
        for (d, data) in t.spec.datasets.iter().zip(&t.datasets) {
            for (split, pool) in [(Split::Train, &data.train), (Split::Eval, &data.eval)] {
                out.extend(pool.iter().map(|e| PoolRecord {
                    id: e.example.example_id,
                    task: t.spec.name.clone(),
                    dataset: d.name.clone(),
                    split,
                    label: e.example.label,
                    text: e.example.text.clone(),
                    image: e.example.image.clone(),
                }));
            }
        }
    }
    out
}

pub fn write_ndjson<T: Serialize>(mut w: impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_ndjson<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Records(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Records(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_matches_config() {
        let cfg = RunConfig::multidomain(5);
        let suite = Suite::build(&cfg).unwrap();
        assert_eq!(suite.registry.len(), 4);
        let probs: f64 = suite.registry.tasks().iter().map(|t| t.sampling_prob).sum();
        assert!((probs - 1.0).abs() < 1e-12);
        let sentiment = &suite.tasks[0];
        assert_eq!(sentiment.datasets.len(), 2);
        assert_eq!(sentiment.train().len(), 2 * 2 * 60);
        let mut ids: Vec<u64> = sentiment.train().iter().chain(&sentiment.eval()).map(|e| e.example_id).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert_eq!(suite.task_by_name("topic").unwrap(), 1);
        assert!(suite.task_by_name("nope").is_err());
    }

    #[test]
    fn pools_round_trip_through_ndjson() {
        let suite = Suite::build(&RunConfig::suite(2)).unwrap();
        let records = pool_records(&suite);
        let mut buf = Vec::new();
        write_ndjson(&mut buf, &records).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), records.len());
        let back: Vec<PoolRecord> = read_ndjson(&buf[..]).unwrap();
        assert_eq!(back, records);
        let vision = back.iter().find(|r| r.image.is_some()).unwrap();
        let orig = suite.tasks.iter().flat_map(|t| t.train()).find(|e| e.example_id == vision.id && e.image.is_some());
        assert_eq!(vision.image, orig.unwrap().image);
    }
}
