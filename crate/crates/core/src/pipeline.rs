//! Model assembly and the three adaptation stages: contrastive fine-tuning
//! of the trainable parameters, head fitting on frozen features, and
//! evaluation on a held-out pool.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::contrastive::{
    explicit_pair_loss, label_distinct_batches, mine_pairs, mnr_loss, ContrastivePair, LabeledExample,
    PairMiningConfig, Polarity,
};
use crate::encoders::{Encoder, EncoderInput, EncoderSpec, Modality, SizeClass};
use crate::error::{Error, Result};
use crate::heads::{self, compute_metrics, fit_head, predict, Head, MetricSet, Prediction};
use crate::hypernet::{configure_budget, BudgetChoice, BudgetReport, BudgetTemplate, HyperNetwork, Projections};
use crate::multitask::{fill_batch, sample_dataset, TaskRegistry, TaskSpec};
use crate::numerics::{clip_global_norm, AdamW, AdamWConfig, LrSchedule, Tape, Tensor, Var};
use crate::params::{Bound, Digest32, ParamEntry, ParamGroup, ParamId, ParamStore};
use crate::rng::{self, Rng};

/// Condition embedding width per factor (task, layer, position).
pub const COND_DIM: usize = 16;
pub const SHARED_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub text: EncoderSpec,
    pub vision: EncoderSpec,
    pub hypernet_enabled: bool,
    pub budget_fraction: f64,
    pub num_tasks: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(text: SizeClass, vision: SizeClass, num_tasks: usize, seed: u64) -> Self {
        ModelConfig {
            text: EncoderSpec::text(text),
            vision: EncoderSpec::vision(vision),
            hypernet_enabled: true,
            budget_fraction: 0.10,
            num_tasks,
            seed,
        }
    }

    pub fn budget_template(&self) -> BudgetTemplate {
        BudgetTemplate {
            text: self.text.clone(),
            vision: self.vision.clone(),
            num_tasks: self.num_tasks,
            cond_dim: COND_DIM,
            shared_dim: SHARED_DIM,
        }
    }
}

/// Frozen encoders, optional hypernetworks, and projections sharing one store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: Encoder,
    pub vision: Encoder,
    /// Text and vision hypernetworks, absent in the no-hypernetwork mode.
    pub hypernets: Option<(HyperNetwork, HyperNetwork)>,
    pub projections: Projections,
    pub budget: Option<BudgetChoice>,
}

/// Which representation heads are fit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureView {
    /// Adapted, projected and L2-normalized shared-space embedding.
    Projected,
    /// Concatenated encoder outputs with no adapters and no projection.
    RawFrozen,
}

impl Model {
    pub fn build(config: &ModelConfig) -> Result<Model> {
        if config.num_tasks == 0 {
            return Err(Error::InvalidConfig("model needs at least one task slot".into()));
        }
        let mut store = ParamStore::new();
        let text = Encoder::build(&config.text, &mut store)?;
        let vision = Encoder::build(&config.vision, &mut store)?;
        let (hypernets, budget) = if config.hypernet_enabled {
            let choice = configure_budget(&config.budget_template(), config.budget_fraction)?;
            let t = HyperNetwork::build(
                &config.text,
                choice.shape,
                config.num_tasks,
                rng::derive(config.seed, rng::tag("hypernet.text")),
                &mut store,
            )?;
            let v = HyperNetwork::build(
                &config.vision,
                choice.shape,
                config.num_tasks,
                rng::derive(config.seed, rng::tag("hypernet.vision")),
                &mut store,
            )?;
            (Some((t, v)), Some(choice))
        } else {
            (None, None)
        };
        let projections = Projections::build(
            config.text.output_dim,
            config.vision.output_dim,
            SHARED_DIM,
            rng::derive(config.seed, rng::tag("projections")),
            &mut store,
        );
        Ok(Model { config: config.clone(), store, text, vision, hypernets, projections, budget })
    }

    /// Whether a parameter receives updates in this model's training mode.
    pub fn is_trainable(&self, entry: &ParamEntry) -> bool {
        match entry.group {
            ParamGroup::Projection => true,
            ParamGroup::Hypernet => self.hypernets.is_some(),
            ParamGroup::Encoder => self.hypernets.is_none(),
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.ids_where(|e| self.is_trainable(e))
    }

    pub fn budget_report(&self) -> BudgetReport {
        let trainable = self.store.element_count(|e| self.is_trainable(e));
        let frozen = self.store.element_count(|e| !self.is_trainable(e));
        BudgetReport::new(trainable, frozen)
    }

    /// SHA-256 over both encoders' weights.
    pub fn encoder_digest(&self) -> Digest32 {
        self.store.digest(|e| e.group == ParamGroup::Encoder)
    }

    pub fn trainable_digest(&self) -> Digest32 {
        self.store.digest(|e| self.is_trainable(e))
    }

    fn check_task(&self, task: &TaskSpec) -> Result<()> {
        if task.task_id >= self.config.num_tasks {
            return Err(Error::UnknownId { kind: "task", id: task.task_id });
        }
        Ok(())
    }

    /// Shared-space embeddings `[n × SHARED_DIM]` recorded on `tape`.
    pub fn embed<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        task: &TaskSpec,
        examples: &[&LabeledExample],
    ) -> Result<Var<'t>> {
        self.check_task(task)?;
        let text = if task.uses(Modality::Text) {
            let tokens = text_payloads(examples)?;
            let adapters = match &self.hypernets {
                Some((h, _)) => Some(h.generate_all(bound, task.task_id)?),
                None => None,
            };
            Some(self.text.forward(tape, bound, EncoderInput::Tokens(&tokens), adapters.as_deref())?)
        } else {
            None
        };
        let image = if task.uses(Modality::Image) {
            let grids = image_payloads(examples)?;
            let adapters = match &self.hypernets {
                Some((_, h)) => Some(h.generate_all(bound, task.task_id)?),
                None => None,
            };
            Some(self.vision.forward(tape, bound, EncoderInput::Grids(&grids), adapters.as_deref())?)
        } else {
            None
        };
        self.projections.forward(bound, text, image)
    }

    /// Feature rows for head fitting and prediction.
    pub fn features(&self, task: &TaskSpec, examples: &[LabeledExample], view: FeatureView) -> Result<Tensor> {
        self.features_counted(task, examples, view).map(|(t, _)| t)
    }

    /// Like [`Model::features`], also returning the floating-point operation count.
    pub fn features_counted(
        &self,
        task: &TaskSpec,
        examples: &[LabeledExample],
        view: FeatureView,
    ) -> Result<(Tensor, u64)> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let refs: Vec<&LabeledExample> = examples.iter().collect();
        let tape = Tape::new();
        let bound = self.store.bind(&tape, |_| false);
        let out = match view {
            FeatureView::Projected => self.embed(&tape, &bound, task, &refs)?.normalize_rows()?,
            FeatureView::RawFrozen => {
                self.check_task(task)?;
                let mut parts = Vec::new();
                if task.uses(Modality::Text) {
                    let tokens = text_payloads(&refs)?;
                    parts.push(self.text.forward(&tape, &bound, EncoderInput::Tokens(&tokens), None)?);
                }
                if task.uses(Modality::Image) {
                    let grids = image_payloads(&refs)?;
                    parts.push(self.vision.forward(&tape, &bound, EncoderInput::Grids(&grids), None)?);
                }
                let mut out = parts[0];
                for p in &parts[1..] {
                    out = out.concat_cols(*p)?;
                }
                out
            }
        };
        Ok((out.value(), tape.flops()))
    }

    /// Shared-space text embeddings of arbitrary token bags, normalized.
    pub fn embed_text(&self, task: &TaskSpec, bags: &[Vec<u32>]) -> Result<Tensor> {
        let examples: Vec<LabeledExample> = bags
            .iter()
            .enumerate()
            .map(|(i, b)| LabeledExample { example_id: i as u64, task_id: task.task_id, text: Some(b.clone()), image: None, label: 0 })
            .collect();
        let text_only = TaskSpec { modalities: vec![Modality::Text], ..task.clone() };
        self.features(&text_only, &examples, FeatureView::Projected)
    }
}

fn text_payloads(examples: &[&LabeledExample]) -> Result<Vec<Vec<u32>>> {
    examples
        .iter()
        .map(|e| e.text.clone().ok_or(Error::ModalityMismatch("task expects a text payload")))
        .collect()
}

fn image_payloads(examples: &[&LabeledExample]) -> Result<Vec<Vec<f64>>> {
    examples
        .iter()
        .map(|e| e.image.clone().ok_or(Error::ModalityMismatch("task expects an image payload")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub peak_lr: f64,
    /// Steps for the joint multitask stage.
    pub total_steps: u64,
    /// Steps for each per-episode contrastive stage.
    pub episode_steps: u64,
    pub clip_norm: f64,
    pub hypernet_weight_decay: f64,
    pub weight_decay: f64,
    pub constant_until_frac: f64,
    /// Fraction of a stage spent warming up.
    pub warmup_frac: f64,
    /// Per-step decay after the constant phase; `None` rescales the reference rate to the stage length.
    pub decay_rate: Option<f64>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            peak_lr: 1e-3,
            total_steps: 2_000,
            episode_steps: 150,
            clip_norm: 1.0,
            hypernet_weight_decay: 0.0,
            weight_decay: 0.1,
            constant_until_frac: 0.8,
            warmup_frac: 0.01,
            decay_rate: None,
        }
    }
}

impl OptimizerSettings {
    pub fn schedule(&self, total_steps: u64) -> LrSchedule {
        let scaled = LrSchedule::scaled(total_steps);
        LrSchedule {
            peak_lr: self.peak_lr,
            constant_until_frac: self.constant_until_frac,
            warmup_steps: (total_steps as f64 * self.warmup_frac) as u64,
            decay_rate: self.decay_rate.unwrap_or(scaled.decay_rate),
            ..scaled
        }
    }
}

/// AdamW over a model's trainable parameters under a learning-rate schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    ids: Vec<ParamId>,
    optimizer: AdamW,
    schedule: LrSchedule,
    clip_norm: f64,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl Trainer {
    pub fn new(model: &Model, settings: &OptimizerSettings, total_steps: u64) -> Result<Trainer> {
        let schedule = settings.schedule(total_steps);
        schedule.validate()?;
        let ids = model.trainable_ids();
        let shapes: Vec<Vec<usize>> = ids.iter().map(|&id| model.store.get(id).shape().to_vec()).collect();
        let decay = ids
            .iter()
            .map(|&id| match model.store.entry(id).group {
                ParamGroup::Hypernet => settings.hypernet_weight_decay,
                _ => settings.weight_decay,
            })
            .collect();
        let optimizer = AdamW::new(AdamWConfig::default(), &shapes, decay)?;
        Ok(Trainer { ids, optimizer, schedule, clip_norm: settings.clip_norm, step: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    /// One optimizer step on the loss built by `loss_fn`.
    pub fn step<F>(&mut self, model: &mut Model, loss_fn: F) -> Result<StepReport>
    where
        F: for<'t> FnOnce(&Model, &'t Tape, &Bound<'t>) -> Result<Var<'t>>,
    {
        let (loss, mut grads) = {
            let tape = Tape::new();
            let bound = model.store.bind(&tape, |e| model.is_trainable(e));
            let loss = loss_fn(model, &tape, &bound)?;
            let g = tape.backward(loss)?;
            let grads: Vec<Tensor> = self
                .ids
                .iter()
                .map(|&id| g.get(bound.var(id)).unwrap_or_else(|| Tensor::zeros(model.store.get(id).shape())))
                .collect();
            (loss.item(), grads)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let grad_norm = clip_global_norm(&mut grads, self.clip_norm)?;
        let lr = self.schedule.lr_at_step((self.step + 1).min(self.schedule.total_steps))?;
        let mut params = model.store.tensors_mut(&self.ids);
        self.optimizer.step(&mut params, &grads, lr)?;
        self.step += 1;
        Ok(StepReport { loss, grad_norm, lr })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "mnr")]
    Mnr,
    #[serde(rename = "explicit")]
    Explicit,
    #[serde(rename = "mnr+explicit")]
    MnrExplicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveSettings {
    #[serde(rename = "R")]
    pub r: usize,
    pub loss: LossKind,
    pub scale: f64,
    pub margin: f64,
}

impl Default for ContrastiveSettings {
    fn default() -> Self {
        ContrastiveSettings { r: 20, loss: LossKind::Mnr, scale: 20.0, margin: 0.0 }
    }
}

/// Why a contrastive stage did not run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    TooFewExamples,
    SingleClass,
    NoPositivePairs,
    Requested,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageReport {
    pub skipped: Option<SkipReason>,
    pub steps: u64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

/// Pairs consumed by one optimizer step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepPairs {
    /// Positive pairs split into groups with pairwise distinct anchor labels.
    pub groups: Vec<Vec<ContrastivePair>>,
    /// Mined positives and negatives, for the explicit pair loss.
    pub explicit: Vec<ContrastivePair>,
}

/// Mines a fresh set of pairs for one step. `Ok(None)` means the examples
/// cannot provide the pairs the configured loss needs.
pub fn mine_step_pairs(
    examples: &[LabeledExample],
    settings: &ContrastiveSettings,
    seed: u64,
) -> Result<Option<(StepPairs, usize, usize)>> {
    let cfg = PairMiningConfig { r: settings.r, rng_seed: rng::derive(seed, rng::tag("mine")) };
    let mined = match mine_pairs(examples, &cfg) {
        Ok(m) => m,
        Err(Error::NoFeasiblePositivePairs | Error::NoFeasibleNegativePairs | Error::TooFewExamples { .. }) => {
            return Ok(None)
        }
        Err(e) => return Err(e),
    };
    let counts = (mined.positives.len(), mined.negatives.len());
    let mut pairs = StepPairs::default();
    if settings.loss != LossKind::Explicit {
        let mut r = rng::seeded(rng::derive(seed, rng::tag("groups")));
        pairs.groups = label_distinct_batches(&mined.positives, examples, &mut r);
        if pairs.groups.is_empty() && settings.loss == LossKind::Mnr {
            return Ok(None);
        }
    }
    if settings.loss != LossKind::Mnr {
        pairs.explicit = mined.positives;
        pairs.explicit.extend(mined.negatives);
    }
    Ok(Some((pairs, counts.0, counts.1)))
}

/// Contrastive loss over one step's pairs: the ranking loss averaged over
/// every anchor of every group, plus the explicit pair loss when enabled.
pub fn pair_objective<'t>(
    model: &Model,
    tape: &'t Tape,
    bound: &Bound<'t>,
    task: &TaskSpec,
    examples: &[LabeledExample],
    pairs: &StepPairs,
    settings: &ContrastiveSettings,
) -> Result<Var<'t>> {
    // Embed each referenced example once.
    let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
    let mut refs: Vec<&LabeledExample> = Vec::new();
    for p in pairs.groups.iter().flatten().chain(&pairs.explicit) {
        for i in [p.anchor, p.other] {
            slot.entry(i).or_insert_with(|| {
                refs.push(&examples[i]);
                refs.len() - 1
            });
        }
    }
    if refs.is_empty() {
        return Err(Error::TooFewExamples { needed: 2, got: 0 });
    }
    let emb = model.embed(tape, bound, task, &refs)?;
    let rows = |ps: &[ContrastivePair], pick: fn(&ContrastivePair) -> usize| -> Result<Var<'t>> {
        let idx: Vec<usize> = ps.iter().map(|p| slot[&pick(p)]).collect();
        emb.gather_rows(&idx)
    };
    let mut total: Option<Var<'t>> = None;
    let anchors: usize = pairs.groups.iter().map(Vec::len).sum();
    for g in &pairs.groups {
        let l = mnr_loss(rows(g, |p| p.anchor)?, rows(g, |p| p.other)?, settings.scale)?
            .scale(g.len() as f64 / anchors as f64)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    if !pairs.explicit.is_empty() {
        let e = &pairs.explicit;
        let pol: Vec<Polarity> = e.iter().map(|p| p.polarity).collect();
        let l = explicit_pair_loss(rows(e, |p| p.anchor)?, rows(e, |p| p.other)?, &pol, settings.margin)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    total.ok_or(Error::TooFewExamples { needed: 2, got: 0 })
}

fn classify_skip(examples: &[LabeledExample]) -> Option<SkipReason> {
    if examples.len() < 2 {
        return Some(SkipReason::TooFewExamples);
    }
    if examples.iter().all(|e| e.label == examples[0].label) {
        return Some(SkipReason::SingleClass);
    }
    None
}

/// Runs `steps` optimizer steps on the configured contrastive loss. Each
/// step mines `R` positive and `R` negative pairs afresh from `examples`;
/// positives are grouped so that the in-batch negatives of the ranking
/// loss never share the anchor's label.
pub fn run_contrastive_stage(
    model: &mut Model,
    task: &TaskSpec,
    examples: &[LabeledExample],
    settings: &ContrastiveSettings,
    optimizer: &OptimizerSettings,
    steps: u64,
    seed: u64,
) -> Result<StageReport> {
    if let Some(reason) = classify_skip(examples) {
        return Ok(StageReport { skipped: Some(reason), ..StageReport::default() });
    }
    let mut report = StageReport::default();
    let mut trainer = Trainer::new(model, optimizer, steps)?;
    for step in 0..steps {
        let Some((pairs, npos, nneg)) = mine_step_pairs(examples, settings, rng::derive(seed, step))? else {
            report.skipped = Some(SkipReason::NoPositivePairs);
            return Ok(report);
        };
        report.positive_pairs = npos;
        report.negative_pairs = nneg;
        let out = trainer.step(model, |m, tape, bound| pair_objective(m, tape, bound, task, examples, &pairs, settings))?;
        report.first_loss.get_or_insert(out.loss);
        report.last_loss = Some(out.loss);
        report.steps += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct JointReport {
    pub steps: u64,
    /// Steps whose batch had no usable pairs.
    pub skipped_batches: u64,
    pub task_counts: Vec<usize>,
    pub last_loss: Option<f64>,
}

/// Shared multitask contrastive training: each step samples a task, then one
/// of its datasets, fills a batch and mines pairs inside it.
/// `datasets[t][d]` holds the examples of dataset `d` of the task at position `t`.
pub fn run_joint_stage(
    model: &mut Model,
    registry: &TaskRegistry,
    datasets: &[Vec<Vec<LabeledExample>>],
    settings: &ContrastiveSettings,
    optimizer: &OptimizerSettings,
    batch_size: usize,
    steps: u64,
    seed: u64,
) -> Result<JointReport> {
    if datasets.len() != registry.len() {
        return Err(Error::ShapeMismatch { op: "run_joint_stage", left: vec![registry.len()], right: vec![datasets.len()] });
    }
    let mut r = rng::seeded(rng::derive(seed, rng::tag("joint")));
    let mut trainer = Trainer::new(model, optimizer, steps)?;
    let mut report = JointReport { task_counts: vec![0; registry.len()], ..JointReport::default() };
    for step in 0..steps {
        let task_id = registry.sample_task(&mut r)?;
        let pos = registry.tasks().iter().position(|t| t.task_id == task_id).expect("registered");
        let task = &registry.tasks()[pos];
        let d = sample_dataset(task, &mut r);
        let batch = fill_batch(task_id, d, &datasets[pos][d], batch_size, &mut r)?;
        report.task_counts[pos] += 1;
        if classify_skip(&batch.examples).is_some() {
            report.skipped_batches += 1;
            continue;
        }
        let Some((pairs, _, _)) = mine_step_pairs(&batch.examples, settings, rng::derive(seed, step))? else {
            report.skipped_batches += 1;
            continue;
        };
        let out = trainer.step(model, |m, tape, bound| {
            pair_objective(m, tape, bound, task, &batch.examples, &pairs, settings)
        })?;
        report.last_loss = Some(out.loss);
        report.steps += 1;
    }
    Ok(report)
}

/// `k` examples per class drawn without replacement (all of a class when it has fewer).
pub fn sample_support(pool: &[LabeledExample], num_classes: usize, k: usize, rng: &mut Rng) -> Vec<LabeledExample> {
    let mut out = Vec::with_capacity(k * num_classes);
    for c in 0..num_classes {
        let mut members: Vec<&LabeledExample> = pool.iter().filter(|e| e.label == c).collect();
        members.shuffle(rng);
        out.extend(members.into_iter().take(k).cloned());
    }
    out
}

/// A fitted head together with the features it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub task_id: usize,
    pub head: Head,
    pub view: FeatureView,
    /// Set when the head cannot use its input (constant or degenerate fit).
    pub chance_flag: bool,
}

/// Fits the task head on frozen features of `support`. With no support,
/// falls back to class-name prototypes when the task has them and to a
/// constant predictor otherwise.
pub fn run_head_stage(
    model: &Model,
    task: &TaskSpec,
    support: &[LabeledExample],
    view: FeatureView,
    l2: f64,
) -> Result<TaskHead> {
    if support.is_empty() {
        let textual = task.modalities == [Modality::Text];
        if textual && task.class_names.len() == task.num_classes && view == FeatureView::Projected {
            let protos = model.embed_text(task, &task.class_names)?;
            return Ok(TaskHead { task_id: task.task_id, head: heads::prototype_head(protos)?, view, chance_flag: false });
        }
        return Ok(TaskHead {
            task_id: task.task_id,
            head: Head::Constant { class: 0, num_classes: task.num_classes },
            view,
            chance_flag: true,
        });
    }
    let x = model.features(task, support, view)?;
    let labels: Vec<usize> = support.iter().map(|e| e.label).collect();
    if task.head_type == heads::HeadType::Softmax && labels.iter().all(|&l| l == labels[0]) {
        return Ok(TaskHead {
            task_id: task.task_id,
            head: Head::Constant { class: labels[0], num_classes: task.num_classes },
            view,
            chance_flag: true,
        });
    }
    let fit = fit_head(&x, &labels, task.head_type, task.num_classes, l2)?;
    Ok(TaskHead { task_id: task.task_id, head: fit.head, view, chance_flag: fit.degenerate })
}

/// Predictions for a batch of examples.
pub fn predict_examples(model: &Model, task: &TaskSpec, head: &TaskHead, examples: &[LabeledExample]) -> Result<Vec<Prediction>> {
    let x = model.features(task, examples, head.view)?;
    (0..examples.len()).map(|r| predict(&head.head, x.row(r))).collect()
}

pub fn evaluate_head(model: &Model, task: &TaskSpec, head: &TaskHead, eval: &[LabeledExample]) -> Result<MetricSet> {
    if eval.is_empty() {
        return Err(Error::EmptyEvalPool);
    }
    let preds: Vec<usize> = predict_examples(model, task, head, eval)?.into_iter().map(|p| p.class).collect();
    let labels: Vec<usize> = eval.iter().map(|e| e.label).collect();
    compute_metrics(&preds, &labels, task.head_type)
}

/// How an episode adapts before fitting its head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeMode {
    /// Contrastive stage, then a head on projected features.
    Full,
    /// No contrastive stage; head on raw frozen encoder outputs.
    RawBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSettings {
    pub contrastive: ContrastiveSettings,
    pub optimizer: OptimizerSettings,
    pub head_l2: f64,
    pub mode: EpisodeMode,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        EpisodeSettings {
            contrastive: ContrastiveSettings::default(),
            optimizer: OptimizerSettings::default(),
            head_l2: heads::DEFAULT_L2,
            mode: EpisodeMode::Full,
        }
    }
}

/// Inputs of one episode. `contrastive` and `head` are usually the same
/// support set; cross-lingual runs widen the contrastive set.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeData<'a> {
    pub contrastive: &'a [LabeledExample],
    pub head: &'a [LabeledExample],
    pub eval: &'a [LabeledExample],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub metrics: MetricSet,
    pub stage: StageReport,
    pub head: TaskHead,
}

/// Adapts a copy of `base` to one task and scores it on the eval set.
pub fn run_episode(
    base: &Model,
    task: &TaskSpec,
    data: EpisodeData<'_>,
    settings: &EpisodeSettings,
    seed: u64,
) -> Result<(Model, EpisodeOutcome)> {
    if data.eval.is_empty() {
        return Err(Error::EmptyEvalPool);
    }
    let mut model = base.clone();
    let (stage, view) = match settings.mode {
        EpisodeMode::Full => {
            let stage = run_contrastive_stage(
                &mut model,
                task,
                data.contrastive,
                &settings.contrastive,
                &settings.optimizer,
                settings.optimizer.episode_steps,
                seed,
            )?;
            (stage, FeatureView::Projected)
        }
        EpisodeMode::RawBaseline => (
            StageReport { skipped: Some(SkipReason::Requested), ..StageReport::default() },
            FeatureView::RawFrozen,
        ),
    };
    let head = run_head_stage(&model, task, data.head, view, settings.head_l2)?;
    let metrics = evaluate_head(&model, task, &head, data.eval)?;
    Ok((model, EpisodeOutcome { metrics, stage, head }))
}

/// Seed of episode `episode` for `(task, k)` under a run seed.
pub fn episode_seed(global_seed: u64, task_id: usize, k: usize, episode: usize) -> u64 {
    let s = rng::derive(global_seed, task_id as u64);
    let s = rng::derive(s, k as u64);
    rng::derive(s, episode as u64)
}

/// Mean positive-pair minus mean negative-pair cosine over all pairs of `examples`.
pub fn cosine_gap(model: &Model, task: &TaskSpec, examples: &[LabeledExample]) -> Result<f64> {
    let x = model.features(task, examples, FeatureView::Projected)?;
    let (mut pos, mut np, mut neg, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..examples.len() {
        for j in i + 1..examples.len() {
            let c: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            if examples[i].label == examples[j].label {
                pos += c;
                np += 1;
            } else {
                neg += c;
                nn += 1;
            }
        }
    }
    if np == 0 || nn == 0 {
        return Err(Error::InvalidConfig(format!("cosine gap needs both pair kinds ({np} positive, {nn} negative)")));
    }
    Ok(pos / np as f64 - neg / nn as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{examples, generate_task, SynthTaskConfig, TaskKind};

    fn setup(kind: TaskKind) -> (Model, crate::synthdata::SynthTask) {
        let task = generate_task(0, &SynthTaskConfig::new(kind, 21)).unwrap();
        let model = Model::build(&ModelConfig::new(SizeClass::Base, SizeClass::Base, 1, 5)).unwrap();
        (model, task)
    }

    #[test]
    fn trainable_sets_follow_mode() {
        let (model, _) = setup(TaskKind::TextBinary);
        assert!(model.trainable_ids().iter().all(|&id| model.store.entry(id).group != ParamGroup::Encoder));
        let report = model.budget_report();
        assert!(report.fraction <= 0.10 && report.fraction > 0.05);
        let mut cfg = model.config.clone();
        cfg.hypernet_enabled = false;
        let plain = Model::build(&cfg).unwrap();
        assert_eq!(plain.store.element_count(|e| e.group == ParamGroup::Hypernet), 0);
        assert!(plain.trainable_ids().iter().all(|&id| plain.store.entry(id).group != ParamGroup::Hypernet));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut model, task) = setup(TaskKind::TextMulticlass);
        let before = model.store.digest(|_| true);
        let support = sample_support(&examples(&task.train), 4, 4, &mut rng::seeded(1));
        let opt = OptimizerSettings { peak_lr: 0.0, ..OptimizerSettings::default() };
        let report =
            run_contrastive_stage(&mut model, &task.spec, &support, &ContrastiveSettings::default(), &opt, 5, 3).unwrap();
        assert_eq!(report.steps, 5);
        assert_eq!(model.store.digest(|_| true), before);
    }

    #[test]
    fn contrastive_stage_keeps_encoders_frozen() {
        let (mut model, task) = setup(TaskKind::VisionlangEntailment);
        let enc = model.encoder_digest();
        let trainable = model.trainable_digest();
        let support = sample_support(&examples(&task.train), 3, 4, &mut rng::seeded(2));
        run_contrastive_stage(&mut model, &task.spec, &support, &ContrastiveSettings::default(), &OptimizerSettings::default(), 5, 1)
            .unwrap();
        assert_eq!(model.encoder_digest(), enc);
        assert_ne!(model.trainable_digest(), trainable);
    }

    #[test]
    fn skips_are_flagged() {
        let (mut model, task) = setup(TaskKind::TextBinary);
        let one: Vec<LabeledExample> = examples(&task.train).into_iter().take(1).collect();
        let r = run_contrastive_stage(&mut model, &task.spec, &one, &ContrastiveSettings::default(), &OptimizerSettings::default(), 5, 1)
            .unwrap();
        assert_eq!(r.skipped, Some(SkipReason::TooFewExamples));
        let same: Vec<LabeledExample> = examples(&task.train).into_iter().filter(|e| e.label == 0).take(4).collect();
        let r = run_contrastive_stage(&mut model, &task.spec, &same, &ContrastiveSettings::default(), &OptimizerSettings::default(), 5, 1)
            .unwrap();
        assert_eq!(r.skipped, Some(SkipReason::SingleClass));
    }

    #[test]
    fn episodes_are_deterministic() {
        let (model, task) = setup(TaskKind::TextBinary);
        let pool = examples(&task.train);
        let eval = examples(&task.eval);
        let support = sample_support(&pool, 2, 4, &mut rng::seeded(8));
        let data = EpisodeData { contrastive: &support, head: &support, eval: &eval };
        let mut settings = EpisodeSettings::default();
        settings.optimizer.episode_steps = 10;
        let (_, a) = run_episode(&model, &task.spec, data, &settings, 4).unwrap();
        let (_, b) = run_episode(&model, &task.spec, data, &settings, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.n_eval, eval.len());
    }

    #[test]
    fn zero_shot_heads() {
        let (model, task) = setup(TaskKind::TextMulticlass);
        let head = run_head_stage(&model, &task.spec, &[], FeatureView::Projected, 1e-3).unwrap();
        assert!(matches!(head.head, Head::Prototype(_)) && !head.chance_flag);
        let (model, task) = setup(TaskKind::VisionMulticlass);
        let head = run_head_stage(&model, &task.spec, &[], FeatureView::Projected, 1e-3).unwrap();
        assert!(head.chance_flag);
        let m = evaluate_head(&model, &task.spec, &head, &examples(&task.eval)).unwrap();
        assert!((m.accuracy - 0.25).abs() < 1e-12);
    }

    #[test]
    fn support_sampling_takes_k_per_class() {
        let task = generate_task(0, &SynthTaskConfig::new(TaskKind::TextMulticlass, 2)).unwrap();
        let s = sample_support(&examples(&task.train), 4, 16, &mut rng::seeded(0));
        assert_eq!(s.len(), 64);
        for c in 0..4 {
            assert_eq!(s.iter().filter(|e| e.label == c).count(), 16);
        }
    }
}
