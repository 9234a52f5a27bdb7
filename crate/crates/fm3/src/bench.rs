//! Per-sample inference latency: encode, adapt, fuse, project, head.

use std::time::Instant;

use fm3_core::contrastive::LabeledExample;
use fm3_core::heads::{predict, Head};
use fm3_core::multitask::TaskSpec;
use fm3_core::pipeline::{Model, TaskHead};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub samples: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub mean_secs: f64,
    pub median_secs: f64,
    pub p95_secs: f64,
    /// Wall time of the whole measured loop.
    pub total_secs: f64,
    /// Floating-point operations per sample; identical on every machine.
    pub flops_per_sample: u64,
}

/// Multiply-adds of applying a head to one embedding, counted as two operations each.
pub fn head_flops(head: &Head) -> u64 {
    let (d, c) = match head {
        Head::Logistic(h) => (h.weight.len(), 1),
        Head::Softmax(h) => (h.weight.shape()[0], h.weight.shape()[1]),
        Head::Prototype(h) => (h.prototypes.shape()[1], h.prototypes.shape()[0]),
        Head::Constant { .. } => (0, 0),
    };
    2 * (d * c) as u64
}

fn predict_one(model: &Model, task: &TaskSpec, head: &TaskHead, example: &LabeledExample) -> Result<u64> {
    let (x, flops) = model.features_counted(task, std::slice::from_ref(example), head.view)?;
    predict(&head.head, x.row(0))?;
    Ok(flops + head_flops(&head.head))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times every sample of `pool` once per repetition, after `warmup` untimed passes.
pub fn bench_inference(
    model: &Model,
    task: &TaskSpec,
    head: &TaskHead,
    pool: &[LabeledExample],
    repetitions: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if pool.is_empty() || repetitions == 0 {
        return Err(Error::Config("benchmark needs a non-empty pool and at least one repetition".into()));
    }
    for _ in 0..warmup {
        for e in pool {
            predict_one(model, task, head, e)?;
        }
    }
    let mut latencies = Vec::with_capacity(pool.len() * repetitions);
    let mut flops = 0u64;
    let outer = Instant::now();
    for _ in 0..repetitions {
        for e in pool {
            let t = Instant::now();
            flops = predict_one(model, task, head, e)?;
            latencies.push(t.elapsed().as_secs_f64());
        }
    }
    let total_secs = outer.elapsed().as_secs_f64();
    let mean_secs = latencies.iter().sum::<f64>() / latencies.len() as f64;
    latencies.sort_by(f64::total_cmp);
    Ok(BenchReport {
        samples: latencies.len(),
        repetitions,
        warmup,
        mean_secs,
        median_secs: percentile(&latencies, 0.5),
        p95_secs: percentile(&latencies, 0.95),
        total_secs,
        flops_per_sample: flops,
    })
}
