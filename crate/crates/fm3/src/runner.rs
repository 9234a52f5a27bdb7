//! Episode evaluation, sweeps and ablations.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use fm3_core::contrastive::LabeledExample;
use fm3_core::pipeline::{
    episode_seed, evaluate_head, run_contrastive_stage, run_head_stage, run_joint_stage, sample_support, EpisodeMode,
    FeatureView, JointReport, Model, SkipReason, StageReport,
};
use fm3_core::rng;
use fm3_core::synthdata::render_multilingual;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, Protocol, RunConfig};
use crate::data::Suite;
use crate::error::{Error, Result};

/// Metrics of one episode. Holds nothing that varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub task: String,
    pub task_id: usize,
    pub k: usize,
    pub episode: usize,
    pub seed: u64,
    pub protocol: Protocol,
    pub mode: EpisodeMode,
    pub accuracy: f64,
    pub f1: f64,
    pub n_eval: usize,
    pub support: usize,
    pub contrastive_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<SkipReason>,
    /// The head could not use its input and predicts at chance.
    pub chance_flag: bool,
}

/// Wall-clock cost of one episode, kept apart from the metric record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTiming {
    pub task: String,
    pub k: usize,
    pub episode: usize,
    pub train_secs: f64,
    pub eval_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub record: EpisodeRecord,
    pub timing: EpisodeTiming,
}

/// The model every episode starts from: freshly built, plus the joint
/// contrastive stage under the joint protocol.
pub fn prepare_base(cfg: &RunConfig, suite: &Suite) -> Result<(Model, Option<JointReport>)> {
    let mut model = Model::build(&cfg.model_config())?;
    if cfg.protocol == Protocol::Episodic {
        return Ok((model, None));
    }
    let report = run_joint_stage(
        &mut model,
        &suite.registry,
        &suite.joint_pools(),
        &cfg.contrastive,
        &cfg.optimizer,
        cfg.batch_size,
        cfg.optimizer.total_steps,
        rng::derive(cfg.global_seed, rng::tag("joint")),
    )?;
    Ok((model, Some(report)))
}

/// Which examples an episode adapts on, fits its head on and scores.
#[derive(Debug, Clone)]
pub struct EpisodeInputs {
    pub contrastive: Vec<LabeledExample>,
    pub head: Vec<LabeledExample>,
    pub eval: Vec<LabeledExample>,
}

/// Support set of `k` examples per class from the task's train pool, and its whole eval pool.
pub fn episode_inputs(suite: &Suite, task: usize, k: usize, seed: u64) -> EpisodeInputs {
    let t = &suite.tasks[task];
    let mut r = rng::seeded(rng::derive(seed, rng::tag("support")));
    let support = sample_support(&t.train(), t.spec.num_classes, k, &mut r);
    EpisodeInputs { contrastive: support.clone(), head: support, eval: t.eval() }
}

/// Cross-lingual inputs for a multilingual task: the support set rendered in
/// every language for adaptation, language 0 for the head, language 1 for scoring.
pub fn cross_lingual_inputs(suite: &Suite, task: usize, k: usize, seed: u64) -> Result<EpisodeInputs> {
    let t = &suite.tasks[task];
    let mut r = rng::seeded(rng::derive(seed, rng::tag("support")));
    let mut pairs = Vec::new();
    for d in &t.datasets {
        pairs.extend(d.train.iter().map(|e| (d, e)));
    }
    let mut picked = Vec::new();
    for c in 0..t.spec.num_classes {
        let mut members: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].1.example.label == c).collect();
        rand::seq::SliceRandom::shuffle(&mut members[..], &mut r);
        picked.extend(members.into_iter().take(k));
    }
    let langs = t.datasets[0].config.num_languages;
    if langs < 2 {
        return Err(Error::Config(format!("task {} has a single language", t.spec.name)));
    }
    let mut contrastive = Vec::new();
    let mut head = Vec::new();
    for &i in &picked {
        let (d, e) = pairs[i];
        for lang in 0..langs {
            contrastive.push(render_multilingual(d, e, lang)?);
        }
        head.push(render_multilingual(d, e, 0)?);
    }
    let mut eval = Vec::new();
    for d in &t.datasets {
        for e in &d.eval {
            eval.push(render_multilingual(d, e, 1)?);
        }
    }
    Ok(EpisodeInputs { contrastive, head, eval })
}

/// Adapts a copy of `base` (episodic protocol, full mode only), fits the
/// head and scores it, timing the two halves separately.
#[allow(clippy::too_many_arguments)]
pub fn run_inputs(
    cfg: &RunConfig,
    suite: &Suite,
    base: &Model,
    task: usize,
    k: usize,
    episode: usize,
    mode: EpisodeMode,
    inputs: &EpisodeInputs,
) -> Result<EpisodeResult> {
    let t = &suite.tasks[task];
    let seed = episode_seed(cfg.global_seed, t.spec.task_id, k, episode);
    let start = Instant::now();
    let mut adapted;
    let mut model = base;
    let (stage, view) = match (mode, cfg.protocol) {
        (EpisodeMode::RawBaseline, _) => {
            (StageReport { skipped: Some(SkipReason::Requested), ..StageReport::default() }, FeatureView::RawFrozen)
        }
        (EpisodeMode::Full, Protocol::Joint) => (StageReport::default(), FeatureView::Projected),
        (EpisodeMode::Full, Protocol::Episodic) => {
            adapted = base.clone();
            let stage = run_contrastive_stage(
                &mut adapted,
                &t.spec,
                &inputs.contrastive,
                &cfg.contrastive,
                &cfg.optimizer,
                cfg.optimizer.episode_steps,
                seed,
            )?;
            model = &adapted;
            (stage, FeatureView::Projected)
        }
    };
    let head = run_head_stage(model, &t.spec, &inputs.head, view, cfg.heads.l2)?;
    let train_secs = positive_secs(start.elapsed());
    let start = Instant::now();
    let metrics = evaluate_head(model, &t.spec, &head, &inputs.eval)?;
    let eval_secs = positive_secs(start.elapsed());
    Ok(EpisodeResult {
        record: EpisodeRecord {
            task: t.spec.name.clone(),
            task_id: t.spec.task_id,
            k,
            episode,
            seed,
            protocol: cfg.protocol,
            mode,
            accuracy: metrics.accuracy,
            f1: metrics.f1,
            n_eval: metrics.n_eval,
            support: inputs.head.len(),
            contrastive_steps: stage.steps,
            skipped: stage.skipped,
            chance_flag: head.chance_flag,
        },
        timing: EpisodeTiming { task: t.spec.name.clone(), k, episode, train_secs, eval_secs },
    })
}

fn positive_secs(d: Duration) -> f64 {
    d.as_secs_f64().max(f64::MIN_POSITIVE)
}

/// One k-shot episode: sample a support set, adapt, fit the head, score on the eval pool.
pub fn evaluate_episode(
    cfg: &RunConfig,
    suite: &Suite,
    base: &Model,
    task: usize,
    k: usize,
    episode: usize,
    mode: EpisodeMode,
) -> Result<EpisodeResult> {
    if !cfg.shots.contains(&k) {
        return Err(Error::Config(format!("k={k} is not among the configured shots {:?}", cfg.shots)));
    }
    let seed = episode_seed(cfg.global_seed, suite.tasks[task].spec.task_id, k, episode);
    let inputs = episode_inputs(suite, task, k, seed);
    run_inputs(cfg, suite, base, task, k, episode, mode, &inputs)
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Every (task, k, episode) unit, run in parallel and returned in that order.
pub fn sweep(
    cfg: &RunConfig,
    suite: &Suite,
    base: &Model,
    tasks: &[usize],
    shots: &[usize],
    mode: EpisodeMode,
) -> Result<Vec<EpisodeResult>> {
    let units: Vec<(usize, usize, usize)> = tasks
        .iter()
        .flat_map(|&t| shots.iter().flat_map(move |&k| (0..cfg.episodes_per_setting).map(move |e| (t, k, e))))
        .collect();
    worker_pool(cfg.workers)?.install(|| {
        units
            .par_iter()
            .map(|&(t, k, e)| evaluate_episode(cfg, suite, base, t, k, e, mode))
            .collect()
    })
}

/// Base model plus the sweep over every task and configured shot count.
pub fn run_eval(cfg: &RunConfig) -> Result<Vec<EpisodeResult>> {
    let suite = Suite::build(cfg)?;
    let (base, _) = prepare_base(cfg, &suite)?;
    let tasks: Vec<usize> = (0..suite.tasks.len()).collect();
    sweep(cfg, &suite, &base, &tasks, &cfg.shots, EpisodeMode::Full)
}

/// Mean accuracy per (task, k) of a sweep.
pub fn mean_accuracy(results: &[EpisodeResult]) -> BTreeMap<(String, usize), f64> {
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for r in results {
        let e = acc.entry((r.record.task.clone(), r.record.k)).or_default();
        e.0 += r.record.accuracy;
        e.1 += 1;
    }
    acc.into_iter().map(|(key, (s, n))| (key, s / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: String,
    pub k: usize,
    pub baseline: f64,
    pub ablated: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub ablation: Ablation,
    pub baseline_fraction: Option<f64>,
    pub ablated_fraction: Option<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut out = format!("ablation {}\n", self.ablation.name());
        let frac = |f: Option<f64>| f.map_or("-".to_string(), |f| format!("{:.4}", f));
        out += &format!(
            "trainable fraction: baseline {}, ablated {}\n",
            frac(self.baseline_fraction),
            frac(self.ablated_fraction)
        );
        let width = self.rows.iter().map(|r| r.task.len()).max().unwrap_or(4).max(4);
        out += &format!("{:<width$}  {:>4}  {:>8}  {:>8}  {:>8}\n", "task", "k", "baseline", "ablated", "delta");
        for r in &self.rows {
            out += &format!(
                "{:<width$}  {:>4}  {:>8.4}  {:>8.4}  {:>+8.4}\n",
                r.task, r.k, r.baseline, r.ablated, r.delta
            );
        }
        out
    }
}

/// Runs the sweep under the baseline and the ablated config and reports per-task deltas.
/// `baseline` may carry results of an earlier run of the same config.
pub fn run_ablation(
    cfg: &RunConfig,
    ablation: Ablation,
    baseline: Option<&[EpisodeResult]>,
) -> Result<(AblationTable, Vec<EpisodeResult>)> {
    let owned;
    let baseline = match baseline {
        Some(b) => b,
        None => {
            owned = run_eval(cfg)?;
            &owned
        }
    };
    let ablated_cfg = ablation.apply(cfg);
    let ablated = run_eval(&ablated_cfg)?;
    let fraction = |c: &RunConfig| -> Result<Option<f64>> {
        if !c.hypernet.enabled {
            return Ok(None);
        }
        Ok(Some(Model::build(&c.model_config())?.budget_report().fraction))
    };
    let base_acc = mean_accuracy(baseline);
    let abl_acc = mean_accuracy(&ablated);
    let mut rows = Vec::new();
    for t in &cfg.tasks {
        for &k in &cfg.shots {
            let key = (t.name.clone(), k);
            if let (Some(&b), Some(&a)) = (base_acc.get(&key), abl_acc.get(&key)) {
                rows.push(AblationRow { task: t.name.clone(), k, baseline: b, ablated: a, delta: a - b });
            }
        }
    }
    let table = AblationTable {
        ablation,
        baseline_fraction: fraction(cfg)?,
        ablated_fraction: fraction(&ablated_cfg)?,
        rows,
    };
    Ok((table, ablated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fm3_core::synthdata::TaskKind;

    fn tiny(protocol: Protocol) -> RunConfig {
        let mut cfg = RunConfig::suite(4);
        cfg.tasks.retain(|t| matches!(t.kind, TaskKind::TextBinary | TaskKind::MultilingualText));
        for t in &mut cfg.tasks {
            t.datasets[0].examples_per_class = 12;
            t.datasets[0].eval_per_class = 6;
        }
        cfg.protocol = protocol;
        cfg.shots = vec![0, 4];
        cfg.episodes_per_setting = 2;
        cfg.optimizer.total_steps = 10;
        cfg.optimizer.episode_steps = 5;
        cfg.workers = 2;
        cfg
    }

    #[test]
    fn sweep_covers_every_unit_in_order() {
        for protocol in [Protocol::Joint, Protocol::Episodic] {
            let cfg = tiny(protocol);
            let results = run_eval(&cfg).unwrap();
            assert_eq!(results.len(), 2 * 2 * 2);
            let keys: Vec<(usize, usize, usize)> =
                results.iter().map(|r| (r.record.task_id, r.record.k, r.record.episode)).collect();
            let mut sorted = keys.clone();
            sorted.sort_unstable();
            assert_eq!(keys, sorted);
            for r in &results {
                assert!(r.timing.train_secs > 0.0 && r.timing.eval_secs > 0.0);
                assert_eq!(r.record.support, r.record.k * cfg.tasks[r.record.task_id].classes);
                assert_eq!(r.record.protocol, protocol);
            }
            let again = run_eval(&cfg).unwrap();
            let records = |rs: &[EpisodeResult]| rs.iter().map(|r| r.record.clone()).collect::<Vec<_>>();
            assert_eq!(records(&results), records(&again));
        }
    }

    #[test]
    fn episodic_full_mode_trains_and_raw_mode_does_not() {
        let cfg = tiny(Protocol::Episodic);
        let suite = Suite::build(&cfg).unwrap();
        let (base, joint) = prepare_base(&cfg, &suite).unwrap();
        assert!(joint.is_none());
        let full = evaluate_episode(&cfg, &suite, &base, 0, 4, 0, EpisodeMode::Full).unwrap();
        assert_eq!(full.record.contrastive_steps, 5);
        let raw = evaluate_episode(&cfg, &suite, &base, 0, 4, 0, EpisodeMode::RawBaseline).unwrap();
        assert_eq!((raw.record.contrastive_steps, raw.record.skipped), (0, Some(SkipReason::Requested)));
        assert!(evaluate_episode(&cfg, &suite, &base, 0, 16, 0, EpisodeMode::Full).is_err());
    }

    #[test]
    fn cross_lingual_inputs_split_languages() {
        let cfg = tiny(Protocol::Episodic);
        let suite = Suite::build(&cfg).unwrap();
        let ml = suite.task_by_name("multilingual_text").unwrap();
        let inputs = cross_lingual_inputs(&suite, ml, 4, 1).unwrap();
        let lang = |e: &LabeledExample| fm3_core::synthdata::language_of(e.text.as_ref().unwrap()[0]);
        assert_eq!(inputs.contrastive.len(), 2 * inputs.head.len());
        assert!(inputs.head.iter().all(|e| lang(e) == 0));
        assert!(inputs.eval.iter().all(|e| lang(e) == 1));
        assert!(cross_lingual_inputs(&suite, 0, 4, 1).is_err());
    }

    #[test]
    fn ablation_reports_every_cell() {
        let cfg = tiny(Protocol::Joint);
        let (table, _) = run_ablation(&cfg, Ablation::NoHypernet, None).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert!(table.baseline_fraction.unwrap() <= 0.10);
        assert_eq!(table.ablated_fraction, None);
        assert!(table.render().contains("no_hypernet"));
    }
}
