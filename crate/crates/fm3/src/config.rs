//! Run configuration: one TOML document, unknown keys rejected.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use fm3_core::encoders::{Modality, SizeClass};
use fm3_core::heads::{HeadType, DEFAULT_L2};
use fm3_core::pipeline::{ContrastiveSettings, EpisodeMode, EpisodeSettings, ModelConfig, OptimizerSettings};
use fm3_core::rng;
use fm3_core::synthdata::{Difficulty, SynthTaskConfig, TaskKind};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the shared parameters are adapted before heads are fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One multitask contrastive stage over every task's train pool; episodes only fit heads.
    #[default]
    Joint,
    /// Every episode runs its own contrastive stage on its k-shot support set.
    Episodic,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Joint => "joint",
            Protocol::Episodic => "episodic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSettings {
    pub text: SizeClass,
    pub vision: SizeClass,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings { text: SizeClass::Base, vision: SizeClass::Base }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypernetSettings {
    pub enabled: bool,
    pub budget_fraction: f64,
}

impl Default for HypernetSettings {
    fn default() -> Self {
        HypernetSettings { enabled: true, budget_fraction: 0.10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSettings {
    pub l2: f64,
}

impl Default for HeadSettings {
    fn default() -> Self {
        HeadSettings { l2: DEFAULT_L2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub examples_per_class: usize,
    pub eval_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    #[serde(default)]
    pub domain: String,
    pub kind: TaskKind,
    pub modalities: Vec<Modality>,
    pub head: HeadType,
    pub classes: usize,
    /// Sampling weight; total dataset size when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    /// Seed of the task's latent layout, shared by all its datasets.
    pub seed: u64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
    pub datasets: Vec<DatasetConfig>,
}

impl TaskConfig {
    /// A single-dataset task with the kind's default shape.
    pub fn synthetic(kind: TaskKind, seed: u64) -> Self {
        let classes = kind.default_classes();
        TaskConfig {
            name: kind.name().to_string(),
            domain: if kind.is_visionlang() || kind == TaskKind::VisionMulticlass { "vision_language" } else { "language" }
                .to_string(),
            kind,
            modalities: kind.modalities(),
            head: if classes == 2 { HeadType::Logistic } else { HeadType::Softmax },
            classes,
            weight: None,
            seed,
            noise: 0.0,
            difficulty: None,
            datasets: vec![DatasetConfig { name: format!("{}-0", kind.name()), examples_per_class: 80, eval_per_class: 50 }],
        }
    }

    pub fn synth_config(&self, dataset: usize, lexicon_seed: u64) -> SynthTaskConfig {
        let d = &self.datasets[dataset];
        SynthTaskConfig {
            num_classes: self.classes,
            examples_per_class: d.examples_per_class,
            eval_per_class: d.eval_per_class,
            noise_level: self.noise,
            lexicon_seed,
            difficulty: self.difficulty.unwrap_or_else(|| Difficulty::for_kind(self.kind)),
            dataset_index: dataset as u64,
            ..SynthTaskConfig::new(self.kind, self.seed)
        }
    }

    fn validate(&self, lexicon_seed: u64) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("task {}: {msg}", self.name)));
        if self.modalities != self.kind.modalities() {
            return bad(format!("{} uses modalities {:?}", self.kind.name(), self.kind.modalities()));
        }
        let want = if self.classes == 2 { HeadType::Logistic } else { HeadType::Softmax };
        if self.head != want {
            return bad(format!("{} classes need a {want:?} head", self.classes));
        }
        if self.datasets.is_empty() {
            return bad("no datasets".into());
        }
        if let Some(w) = self.weight {
            if !w.is_finite() || w < 0.0 {
                return bad(format!("weight {w}"));
            }
        }
        for i in 0..self.datasets.len() {
            if self.datasets[i].eval_per_class == 0 {
                return bad(format!("dataset {} has an empty eval pool", self.datasets[i].name));
            }
            self.synth_config(i, lexicon_seed).validate().map_err(|e| Error::Config(format!("task {}: {e}", self.name)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub global_seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_episodes")]
    pub episodes_per_setting: usize,
    /// Parallel episode workers; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub protocol: Protocol,
    /// Seed of the token vocabulary every synthetic task shares.
    #[serde(default)]
    pub lexicon_seed: u64,
    #[serde(default)]
    pub encoders: EncoderSettings,
    #[serde(default)]
    pub hypernet: HypernetSettings,
    #[serde(default)]
    pub contrastive: ContrastiveSettings,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub heads: HeadSettings,
    pub tasks: Vec<TaskConfig>,
}

/// Seeds derived from the global seed, kept below 2^63 so they fit a TOML integer.
pub fn derived_seed(global_seed: u64, tag: u64) -> u64 {
    rng::derive(global_seed, tag) >> 1
}

fn default_batch_size() -> usize {
    fm3_core::multitask::DEFAULT_BATCH_SIZE
}

fn default_shots() -> Vec<usize> {
    vec![0, 4, 16, 64]
}

fn default_episodes() -> usize {
    20
}

impl RunConfig {
    fn with_tasks(global_seed: u64, tasks: Vec<TaskConfig>) -> Self {
        RunConfig {
            global_seed,
            batch_size: default_batch_size(),
            shots: default_shots(),
            episodes_per_setting: default_episodes(),
            workers: 0,
            protocol: Protocol::default(),
            lexicon_seed: 0,
            encoders: EncoderSettings::default(),
            hypernet: HypernetSettings::default(),
            contrastive: ContrastiveSettings::default(),
            optimizer: OptimizerSettings::default(),
            heads: HeadSettings::default(),
            tasks,
        }
    }

    /// One noiseless task of every synthetic kind.
    pub fn suite(global_seed: u64) -> Self {
        let tasks = TaskKind::ALL
            .into_iter()
            .enumerate()
            .map(|(i, kind)| TaskConfig::synthetic(kind, derived_seed(global_seed, 100 + i as u64)))
            .collect();
        Self::with_tasks(global_seed, tasks)
    }

    /// Two domains, four tasks and seven datasets, mirroring a typical benchmark table.
    pub fn multidomain(global_seed: u64) -> Self {
        let task = |name: &str, kind: TaskKind, datasets: &[&str], i: u64| {
            let mut t = TaskConfig::synthetic(kind, derived_seed(global_seed, 200 + i));
            t.name = name.to_string();
            t.datasets = datasets
                .iter()
                .map(|d| DatasetConfig { name: d.to_string(), examples_per_class: 60, eval_per_class: 40 })
                .collect();
            t
        };
        let mut tasks = vec![
            task("sentiment", TaskKind::TextBinary, &["reviews", "tweets"], 0),
            task("topic", TaskKind::TextMulticlass, &["news", "forums"], 1),
            task("visual_entailment", TaskKind::VisionlangEntailment, &["ve-captions", "ve-scenes"], 2),
            task("visual_qa", TaskKind::VisionlangQa, &["vqa-open"], 3),
        ];
        tasks[2].domain = "vision_language".into();
        tasks[3].domain = "vision_language".into();
        Self::with_tasks(global_seed, tasks)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.tasks.is_empty() {
            return bad("no tasks declared");
        }
        if self.global_seed.max(self.lexicon_seed) > i64::MAX as u64 || self.tasks.iter().any(|t| t.seed > i64::MAX as u64) {
            return bad("seeds must be below 2^63");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.shots.is_empty() || self.shots.iter().collect::<BTreeSet<_>>().len() != self.shots.len() {
            return bad("shots must be a non-empty list of distinct values");
        }
        if self.episodes_per_setting == 0 {
            return bad("episodes_per_setting must be positive");
        }
        let b = self.hypernet.budget_fraction;
        if !(b > 0.0 && b < 1.0) {
            return bad("hypernet.budget_fraction must lie in (0, 1)");
        }
        let c = &self.contrastive;
        if c.r == 0 || !(c.scale > 0.0) || !(c.margin >= 0.0) {
            return bad("contrastive needs R > 0, scale > 0 and margin >= 0");
        }
        let o = &self.optimizer;
        if !(o.peak_lr > 0.0) || !(o.clip_norm > 0.0) || !(0.0..1.0).contains(&o.warmup_frac) {
            return bad("optimizer needs peak_lr > 0, clip_norm > 0 and warmup_frac in [0, 1)");
        }
        if !(self.heads.l2 >= 0.0) {
            return bad("heads.l2 must be non-negative");
        }
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Config(format!("duplicate task {}", t.name)));
            }
            t.validate(self.lexicon_seed)?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hypernet_enabled: self.hypernet.enabled,
            budget_fraction: self.hypernet.budget_fraction,
            ..ModelConfig::new(
                self.encoders.text,
                self.encoders.vision,
                self.tasks.len(),
                derived_seed(self.global_seed, rng::tag("model")),
            )
        }
    }

    pub fn episode_settings(&self, mode: EpisodeMode) -> EpisodeSettings {
        EpisodeSettings { contrastive: self.contrastive, optimizer: self.optimizer, head_l2: self.heads.l2, mode }
    }
}

/// The ablation modes: no hypernetworks, a 5% budget, and smaller encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoHypernet,
    #[serde(rename = "budget_5pct")]
    Budget5Pct,
    SmallText,
    SmallVision,
    SmallBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::NoHypernet, Ablation::Budget5Pct, Ablation::SmallText, Ablation::SmallVision, Ablation::SmallBoth];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoHypernet => "no_hypernet",
            Ablation::Budget5Pct => "budget_5pct",
            Ablation::SmallText => "small_text",
            Ablation::SmallVision => "small_vision",
            Ablation::SmallBoth => "small_both",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Ablation::NoHypernet => cfg.hypernet.enabled = false,
            Ablation::Budget5Pct => cfg.hypernet.budget_fraction = 0.05,
            Ablation::SmallText => cfg.encoders.text = SizeClass::Small,
            Ablation::SmallVision => cfg.encoders.vision = SizeClass::Small,
            Ablation::SmallBoth => {
                cfg.encoders.text = SizeClass::Small;
                cfg.encoders.vision = SizeClass::Small;
            }
        }
        cfg
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate_and_round_trip() {
        for cfg in [RunConfig::suite(3), RunConfig::multidomain(3)] {
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        }
        let md = RunConfig::multidomain(3);
        let domains: BTreeSet<&str> = md.tasks.iter().map(|t| t.domain.as_str()).collect();
        assert_eq!((domains.len(), md.tasks.len()), (2, 4));
        assert_eq!(md.tasks.iter().map(|t| t.datasets.len()).sum::<usize>(), 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = RunConfig::suite(1).to_toml().unwrap().replace("global_seed", "global_sede");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        let text = RunConfig::suite(1).to_toml().unwrap().replace("[hypernet]", "[hypernet]\nwidth = 3");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let text = r#"
global_seed = 9

[[tasks]]
name = "t"
kind = "text_binary"
modalities = ["text"]
head = "logistic"
classes = 2
seed = 1
datasets = [{ name = "d", examples_per_class = 10, eval_per_class = 5 }]
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.shots, vec![0, 4, 16, 64]);
        assert_eq!((cfg.batch_size, cfg.episodes_per_setting), (32, 20));
        assert_eq!(cfg.contrastive.r, 20);
        assert_eq!(cfg.protocol, Protocol::Joint);
    }

    #[test]
    fn inconsistent_tasks_are_rejected() {
        let mut cfg = RunConfig::suite(1);
        cfg.tasks[0].head = HeadType::Softmax;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::suite(1);
        cfg.tasks[2].modalities = vec![Modality::Text];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::suite(1);
        cfg.tasks[1].name = cfg.tasks[0].name.clone();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::suite(1);
        cfg.shots = vec![4, 4];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablations_parse_and_apply() {
        let base = RunConfig::suite(1);
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            assert_ne!(a.apply(&base), base);
        }
        assert!("no_adapters".parse::<Ablation>().is_err());
        assert_eq!(Ablation::Budget5Pct.apply(&base).model_config().budget_fraction, 0.05);
    }
}
