//! Seeded synthetic tasks covering text-only, image-only, text+image and
//! multilingual classification.
//!
//! Every example is rendered from a small set of discrete latent factors.
//! Text carries a factor as a few motif tokens mixed into filler tokens;
//! images carry a factor as a Gaussian blob at one of two prototype
//! locations, plus a distractor blob and pixel noise. Tasks that use both
//! modalities put one factor in each and label by bucketing their sum.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::contrastive::LabeledExample;
use crate::encoders::{Modality, GRID_CHANNELS, GRID_LEN, GRID_SIDE, TEXT_VOCAB};
use crate::error::{Error, Result};
use crate::heads::HeadType;
use crate::multitask::{DatasetRef, TaskSpec};
use crate::rng::{self, Rng};

/// Token ids per language block.
pub const LANGUAGE_BLOCK: usize = 1024;
pub const MAX_LANGUAGES: usize = TEXT_VOCAB / LANGUAGE_BLOCK;
/// Leading part of each block used for filler tokens.
pub const FILLER_TOKENS: usize = 512;
/// Motif slots shared by all tasks of one lexicon.
pub const CONCEPT_POOL: usize = 24;
/// Example ids are `base << LANGUAGE_BITS | language`.
pub const LANGUAGE_BITS: u32 = 4;
/// Base ids of dataset `d` start at `d << DATASET_ID_BITS`.
pub const DATASET_ID_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TextBinary,
    TextMulticlass,
    VisionMulticlass,
    VisionlangEntailment,
    VisionlangQa,
    MultilingualText,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::TextBinary,
        TaskKind::TextMulticlass,
        TaskKind::VisionMulticlass,
        TaskKind::VisionlangEntailment,
        TaskKind::VisionlangQa,
        TaskKind::MultilingualText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::TextBinary => "text_binary",
            TaskKind::TextMulticlass => "text_multiclass",
            TaskKind::VisionMulticlass => "vision_multiclass",
            TaskKind::VisionlangEntailment => "visionlang_entailment",
            TaskKind::VisionlangQa => "visionlang_qa",
            TaskKind::MultilingualText => "multilingual_text",
        }
    }

    pub fn modalities(self) -> Vec<Modality> {
        match self {
            TaskKind::VisionMulticlass => vec![Modality::Image],
            TaskKind::VisionlangEntailment | TaskKind::VisionlangQa => vec![Modality::Text, Modality::Image],
            _ => vec![Modality::Text],
        }
    }

    pub fn is_visionlang(self) -> bool {
        matches!(self, TaskKind::VisionlangEntailment | TaskKind::VisionlangQa)
    }

    /// Class count the kind requires, if fixed.
    pub fn fixed_classes(self) -> Option<usize> {
        match self {
            TaskKind::TextBinary => Some(2),
            TaskKind::VisionlangEntailment => Some(3),
            TaskKind::VisionlangQa => Some(4),
            _ => None,
        }
    }

    pub fn default_classes(self) -> usize {
        self.fixed_classes().unwrap_or(4)
    }

    fn visionlang_levels(self) -> usize {
        3
    }
}

/// Knobs controlling how much of each payload is signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Difficulty {
    pub text_len: usize,
    /// Motif tokens placed in each text.
    pub motif_hits: usize,
    /// Size of each level's motif token set.
    pub motif_set: usize,
    pub blob_amplitude: f64,
    pub blob_sigma: f64,
    /// Uniform jitter of the blob centre, in cells.
    pub blob_jitter: f64,
    pub distractor_amplitude: f64,
    pub pixel_noise: f64,
}

impl Default for Difficulty {
    fn default() -> Self {
        Difficulty {
            text_len: 12,
            motif_hits: 4,
            motif_set: 6,
            blob_amplitude: 1.0,
            blob_sigma: 1.0,
            blob_jitter: 0.75,
            distractor_amplitude: 0.5,
            pixel_noise: 0.12,
        }
    }
}

impl Difficulty {
    /// Default settings per kind. Text+image tasks get cleaner payloads
    /// because each modality carries only half of the label.
    pub fn for_kind(kind: TaskKind) -> Self {
        if kind.is_visionlang() {
            Difficulty {
                motif_hits: 6,
                motif_set: 3,
                blob_jitter: 0.5,
                distractor_amplitude: 0.4,
                pixel_noise: 0.08,
                ..Difficulty::default()
            }
        } else {
            Difficulty::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTaskConfig {
    pub task_kind: TaskKind,
    pub num_classes: usize,
    pub examples_per_class: usize,
    pub eval_per_class: usize,
    pub noise_level: f64,
    pub num_languages: usize,
    pub rng_seed: u64,
    /// Seed of the concept pool and language tables; tasks that share it share a vocabulary.
    #[serde(default)]
    pub lexicon_seed: u64,
    #[serde(default)]
    pub difficulty: Difficulty,
    /// Datasets of one task share `rng_seed` (and so the layout) but draw
    /// their examples from separate streams and id ranges.
    #[serde(default)]
    pub dataset_index: u64,
}

impl SynthTaskConfig {
    pub fn new(kind: TaskKind, rng_seed: u64) -> Self {
        SynthTaskConfig {
            task_kind: kind,
            num_classes: kind.default_classes(),
            examples_per_class: 80,
            eval_per_class: 50,
            noise_level: 0.0,
            num_languages: if kind == TaskKind::MultilingualText { 2 } else { 1 },
            rng_seed,
            lexicon_seed: 0,
            difficulty: Difficulty::for_kind(kind),
            dataset_index: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.examples_per_class < 1 {
            return Err(Error::TooFewExamples { needed: 1, got: 0 });
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return bad(format!("noise level {} outside [0, 1)", self.noise_level));
        }
        if let Some(c) = self.task_kind.fixed_classes() {
            if self.num_classes != c {
                return bad(format!("{} has exactly {c} classes", self.task_kind.name()));
            }
        }
        if self.num_classes < 2 || self.num_classes > 8 {
            return bad(format!("class count {} outside 2..=8", self.num_classes));
        }
        let langs_ok = match self.task_kind {
            TaskKind::MultilingualText => (2..=MAX_LANGUAGES).contains(&self.num_languages),
            _ => self.num_languages == 1,
        };
        if !langs_ok {
            return bad(format!("{} languages for {}", self.num_languages, self.task_kind.name()));
        }
        let d = &self.difficulty;
        if d.motif_hits == 0 || d.motif_hits > d.text_len || d.motif_set == 0 {
            return bad("motif settings must fit inside the text".into());
        }
        if self.levels() * d.motif_set > LANGUAGE_BLOCK - FILLER_TOKENS {
            return bad("motif vocabulary does not fit in a language block".into());
        }
        if self.dataset_index >= 1 << 20 {
            return bad(format!("dataset index {} too large", self.dataset_index));
        }
        if !(d.blob_sigma > 0.0 && d.pixel_noise >= 0.0 && d.blob_jitter >= 0.0) {
            return bad("image noise settings must be non-negative".into());
        }
        Ok(())
    }

    /// Number of values each latent factor takes.
    fn levels(&self) -> usize {
        if self.task_kind.is_visionlang() {
            self.task_kind.visionlang_levels()
        } else {
            self.num_classes
        }
    }
}

/// Label of a text+image example from its two factors.
pub fn visionlang_label(kind: TaskKind, a: usize, b: usize) -> usize {
    let s = a + b;
    match kind {
        TaskKind::VisionlangEntailment => match s {
            0 | 1 => 0,
            2 => 1,
            _ => 2,
        },
        _ => match s {
            0 | 1 => 0,
            2 => 1,
            3 => 2,
            _ => 3,
        },
    }
}

/// Class-defining latent state of one example plus the per-task rendering
/// tables shared by every example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFactor {
    /// Factor values: `[level]` for single-factor kinds, `[text, image]` for text+image.
    pub factors: Vec<usize>,
    /// Language-neutral token slots, mapped through a language table at render time.
    pub token_slots: Vec<u32>,
    pub language: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthExample {
    pub example: LabeledExample,
    pub latent: LatentFactor,
    /// Label before noise.
    pub clean_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub config: SynthTaskConfig,
    pub spec: TaskSpec,
    pub train: Vec<SynthExample>,
    pub eval: Vec<SynthExample>,
    /// `token_tables[language][slot]` is the token id of a slot in that language.
    pub token_tables: Vec<Vec<u32>>,
}

struct Renderer {
    kind: TaskKind,
    levels: usize,
    difficulty: Difficulty,
    /// `[level][set member]` slot ids in `FILLER_TOKENS..LANGUAGE_BLOCK`.
    motif_slots: Vec<Vec<u32>>,
    /// `[level][prototype]` blob centre and channel mix.
    prototypes: Vec<[([f64; 2], [f64; GRID_CHANNELS]); 2]>,
}

impl Renderer {
    fn new(cfg: &SynthTaskConfig) -> Renderer {
        let levels = cfg.levels();
        let d = cfg.difficulty;
        // Every task sharing a lexicon draws its motifs from the same concept pool.
        let mut pool: Vec<u32> = (FILLER_TOKENS as u32..LANGUAGE_BLOCK as u32).collect();
        pool.shuffle(&mut rng::seeded(rng::derive(cfg.lexicon_seed, rng::tag("concepts"))));
        pool.truncate(CONCEPT_POOL.max(levels * d.motif_set));
        let mut r = rng::seeded(rng::derive(cfg.rng_seed, rng::tag("layout")));
        let mut slots = pool;
        slots.shuffle(&mut r);
        let motif_slots = (0..levels)
            .map(|l| slots[l * d.motif_set..(l + 1) * d.motif_set].to_vec())
            .collect();
        let mut cells: Vec<[f64; 2]> = Vec::new();
        for y in [1.5, 3.5, 5.5] {
            for x in [1.5, 3.5, 5.5] {
                cells.push([x, y]);
            }
        }
        let prototypes = (0..levels)
            .map(|_| {
                let proto = |r: &mut Rng| {
                    let c = cells[r.random_range(0..cells.len())];
                    let mut mix = [0.0; GRID_CHANNELS];
                    mix[r.random_range(0..GRID_CHANNELS)] = 1.0;
                    mix.iter_mut().for_each(|m| *m += 0.3 * r.random::<f64>());
                    (c, mix)
                };
                [proto(&mut r), proto(&mut r)]
            })
            .collect();
        Renderer { kind: cfg.task_kind, levels, difficulty: d, motif_slots, prototypes }
    }

    fn text_slots(&self, level: usize, r: &mut Rng) -> Vec<u32> {
        let d = self.difficulty;
        let mut slots: Vec<u32> = (0..d.text_len).map(|_| r.random_range(0..FILLER_TOKENS as u32)).collect();
        let mut positions: Vec<usize> = (0..d.text_len).collect();
        positions.shuffle(r);
        for &p in &positions[..d.motif_hits] {
            let set = &self.motif_slots[level];
            slots[p] = set[r.random_range(0..set.len())];
        }
        slots
    }

    fn blob(grid: &mut [f64], centre: [f64; 2], mix: &[f64; GRID_CHANNELS], amplitude: f64, sigma: f64) {
        for y in 0..GRID_SIDE {
            for x in 0..GRID_SIDE {
                let dx = x as f64 + 0.5 - centre[0];
                let dy = y as f64 + 0.5 - centre[1];
                let g = amplitude * libm::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                for (c, m) in mix.iter().enumerate() {
                    grid[(y * GRID_SIDE + x) * GRID_CHANNELS + c] += g * m;
                }
            }
        }
    }

    fn image(&self, level: usize, r: &mut Rng) -> Vec<f64> {
        let d = self.difficulty;
        let mut grid = rng::gaussian(r, GRID_LEN, d.pixel_noise);
        let (centre, mix) = self.prototypes[level][r.random_range(0..2)];
        let jitter = |r: &mut Rng| (r.random::<f64>() * 2.0 - 1.0) * d.blob_jitter;
        let centre = [centre[0] + jitter(r), centre[1] + jitter(r)];
        Self::blob(&mut grid, centre, &mix, d.blob_amplitude, d.blob_sigma);
        if d.distractor_amplitude > 0.0 {
            let at = [r.random::<f64>() * GRID_SIDE as f64, r.random::<f64>() * GRID_SIDE as f64];
            let mut dmix = [0.0; GRID_CHANNELS];
            dmix.iter_mut().for_each(|m| *m = r.random::<f64>());
            Self::blob(&mut grid, at, &dmix, d.distractor_amplitude, d.blob_sigma);
        }
        grid
    }

    /// Draws factors consistent with `class` and renders the payloads.
    fn sample(&self, class: usize, language: usize, r: &mut Rng) -> (LatentFactor, Option<Vec<f64>>) {
        let factors = if self.kind.is_visionlang() {
            let combos: Vec<[usize; 2]> = (0..self.levels)
                .flat_map(|a| (0..self.levels).map(move |b| [a, b]))
                .filter(|&[a, b]| visionlang_label(self.kind, a, b) == class)
                .collect();
            combos[r.random_range(0..combos.len())].to_vec()
        } else {
            vec![class]
        };
        let (token_slots, image) = match self.kind {
            TaskKind::VisionMulticlass => (Vec::new(), Some(self.image(factors[0], r))),
            TaskKind::VisionlangEntailment | TaskKind::VisionlangQa => {
                (self.text_slots(factors[0], r), Some(self.image(factors[1], r)))
            }
            _ => (self.text_slots(factors[0], r), None),
        };
        let latent = LatentFactor { factors, token_slots, language };
        (latent, image)
    }
}

fn render_tokens(tables: &[Vec<u32>], latent: &LatentFactor, language: usize) -> Vec<u32> {
    latent.token_slots.iter().map(|&s| tables[language][s as usize]).collect()
}

/// Builds train and eval pools plus the task description.
pub fn generate_task(task_id: usize, cfg: &SynthTaskConfig) -> Result<SynthTask> {
    cfg.validate()?;
    let renderer = Renderer::new(cfg);
    let mut table_rng = rng::seeded(rng::derive(cfg.lexicon_seed, rng::tag("languages")));
    let token_tables: Vec<Vec<u32>> = (0..cfg.num_languages)
        .map(|lang| {
            let base = (lang * LANGUAGE_BLOCK) as u32;
            let mut perm: Vec<u32> = (0..LANGUAGE_BLOCK as u32).collect();
            perm.shuffle(&mut table_rng);
            perm.into_iter().map(|p| base + p).collect()
        })
        .collect();
    let uses_text = cfg.task_kind != TaskKind::VisionMulticlass;
    let mut next_id = cfg.dataset_index << DATASET_ID_BITS;
    let mut pool = |per_class: usize, stream: &str| -> Vec<SynthExample> {
        let mut r = rng::seeded(rng::derive(rng::derive(cfg.rng_seed, rng::tag(stream)), cfg.dataset_index));
        let mut out = Vec::with_capacity(per_class * cfg.num_classes);
        for _ in 0..per_class {
            for class in 0..cfg.num_classes {
                let base = next_id;
                next_id += 1;
                let language = (base as usize) % cfg.num_languages;
                let (latent, image) = renderer.sample(class, language, &mut r);
                let label = if r.random::<f64>() < cfg.noise_level {
                    (class + r.random_range(1..cfg.num_classes)) % cfg.num_classes
                } else {
                    class
                };
                let text = uses_text.then(|| render_tokens(&token_tables, &latent, language));
                out.push(SynthExample {
                    example: LabeledExample {
                        example_id: base << LANGUAGE_BITS | language as u64,
                        task_id,
                        text,
                        image,
                        label,
                    },
                    latent,
                    clean_label: class,
                });
            }
        }
        out
    };
    let train = pool(cfg.examples_per_class, "train");
    let eval = pool(cfg.eval_per_class, "eval");

    let head_type = if cfg.num_classes == 2 { HeadType::Logistic } else { HeadType::Softmax };
    let mut spec = TaskSpec::new(
        task_id,
        cfg.task_kind.name(),
        cfg.task_kind.modalities(),
        head_type,
        cfg.num_classes,
        vec![DatasetRef { name: format!("{}-train", cfg.task_kind.name()), size: train.len() }],
    );
    if uses_text && !cfg.task_kind.is_visionlang() {
        // A class name is its motif vocabulary in language 0.
        spec.class_names = renderer
            .motif_slots
            .iter()
            .map(|slots| slots.iter().map(|&s| token_tables[0][s as usize]).collect())
            .collect();
    }
    Ok(SynthTask { config: cfg.clone(), spec, train, eval, token_tables })
}

/// Re-renders a multilingual example's text in another language.
pub fn render_multilingual(task: &SynthTask, example: &SynthExample, language: usize) -> Result<LabeledExample> {
    if task.config.task_kind != TaskKind::MultilingualText {
        return Err(Error::InvalidConfig(format!("{} is not multilingual", task.config.task_kind.name())));
    }
    if language >= task.config.num_languages {
        return Err(Error::UnknownId { kind: "language", id: language });
    }
    let base = example.example.example_id >> LANGUAGE_BITS;
    Ok(LabeledExample {
        example_id: base << LANGUAGE_BITS | language as u64,
        text: Some(render_tokens(&task.token_tables, &example.latent, language)),
        ..example.example.clone()
    })
}

/// Language block an example's tokens come from.
pub fn language_of(token: u32) -> usize {
    token as usize / LANGUAGE_BLOCK
}

/// Latent factors as a feature row, for oracle heads.
pub fn oracle_features(task: &SynthTask, example: &SynthExample) -> Vec<f64> {
    if task.config.task_kind.is_visionlang() {
        example.latent.factors.iter().map(|&f| f as f64).collect()
    } else {
        let mut one_hot = vec![0.0; task.config.num_classes];
        one_hot[example.latent.factors[0]] = 1.0;
        one_hot
    }
}

pub fn examples(pool: &[SynthExample]) -> Vec<LabeledExample> {
    pool.iter().map(|e| e.example.clone()).collect()
}
