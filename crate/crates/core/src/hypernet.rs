//! Shared hypernetworks that emit adapter weights, projection heads into the
//! contrastive space, and parameter-budget accounting.
//!
//! A hypernetwork embeds `(task, layer, position)`, concatenates the three
//! condition vectors, applies one tanh hidden layer, and reads every adapter
//! block off a separate linear head. One hypernetwork serves one modality
//! and is shared by every task, layer and position of that modality.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, EmbeddingKind, Encoder, EncoderSpec, Modality, POSITIONS_PER_LAYER};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::rng;

/// Weights of one residual bottleneck adapter (`h` hidden, `b` bottleneck).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub down_weight: Tensor,
    pub down_bias: Tensor,
    pub up_weight: Tensor,
    pub up_bias: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

/// Adapter weights recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars<'t> {
    pub down_weight: Var<'t>,
    pub down_bias: Var<'t>,
    pub up_weight: Var<'t>,
    pub up_bias: Var<'t>,
    pub ln_gain: Var<'t>,
    pub ln_bias: Var<'t>,
}

impl AdapterParams {
    /// Adapter with random down projection and zero up projection.
    pub fn zero_output(hidden: usize, bottleneck: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        AdapterParams {
            down_weight: Tensor::new(&[hidden, bottleneck], rng::gaussian(&mut r, hidden * bottleneck, 0.3))
                .expect("shape"),
            down_bias: Tensor::vector(rng::gaussian(&mut r, bottleneck, 0.1)),
            up_weight: Tensor::zeros(&[bottleneck, hidden]),
            up_bias: Tensor::zeros(&[hidden]),
            ln_gain: Tensor::full(&[hidden], 1.0),
            ln_bias: Tensor::zeros(&[hidden]),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> AdapterVars<'t> {
        AdapterVars {
            down_weight: tape.constant(self.down_weight.clone()),
            down_bias: tape.constant(self.down_bias.clone()),
            up_weight: tape.constant(self.up_weight.clone()),
            up_bias: tape.constant(self.up_bias.clone()),
            ln_gain: tape.constant(self.ln_gain.clone()),
            ln_bias: tape.constant(self.ln_bias.clone()),
        }
    }

    pub fn max_abs_diff(&self, other: &AdapterParams) -> f64 {
        [
            self.down_weight.max_abs_diff(&other.down_weight),
            self.down_bias.max_abs_diff(&other.down_bias),
            self.up_weight.max_abs_diff(&other.up_weight),
            self.up_bias.max_abs_diff(&other.up_bias),
            self.ln_gain.max_abs_diff(&other.ln_gain),
            self.ln_bias.max_abs_diff(&other.ln_bias),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

impl<'t> AdapterVars<'t> {
    /// `x + up(tanh(down(layernorm(x))))`, row-wise over `[n × h]`.
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        let inner = x
            .layer_norm(self.ln_gain, self.ln_bias)?
            .matmul(self.down_weight)?
            .add_row(self.down_bias)?
            .tanh()?
            .matmul(self.up_weight)?
            .add_row(self.up_bias)?;
        x.add(inner)
    }

    pub fn values(&self) -> AdapterParams {
        AdapterParams {
            down_weight: self.down_weight.value(),
            down_bias: self.down_bias.value(),
            up_weight: self.up_weight.value(),
            up_bias: self.up_bias.value(),
            ln_gain: self.ln_gain.value(),
            ln_bias: self.ln_bias.value(),
        }
    }
}

/// Shape of a hypernetwork.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperNetShape {
    pub bottleneck: usize,
    pub width: usize,
    pub cond_dim: usize,
}

impl HyperNetShape {
    /// Elements emitted per adapter site for hidden size `h`.
    pub fn site_len(&self, h: usize) -> usize {
        2 * h * self.bottleneck + self.bottleneck + 3 * h
    }

    /// Closed-form parameter count for a hypernetwork driving `spec`.
    pub fn param_count(&self, spec: &EncoderSpec, num_tasks: usize) -> usize {
        let rows = num_tasks + spec.num_layers + POSITIONS_PER_LAYER;
        let body = 3 * self.cond_dim * self.width + self.width;
        rows * self.cond_dim + body + (self.width + 1) * self.site_len(spec.hidden_dim)
    }
}

const BLOCKS: usize = 6;

#[derive(Debug, Clone)]
pub struct HyperNetwork {
    modality: Modality,
    hidden: usize,
    shape: HyperNetShape,
    num_tasks: usize,
    num_layers: usize,
    task_emb: ParamId,
    layer_emb: ParamId,
    pos_emb: ParamId,
    body_w: ParamId,
    body_b: ParamId,
    heads: [(ParamId, ParamId); BLOCKS],
}

/// Standard deviation of the condition embedding tables at initialization.
pub const COND_INIT_STD: f64 = 0.02;

impl HyperNetwork {
    pub fn build(
        encoder: &EncoderSpec,
        shape: HyperNetShape,
        num_tasks: usize,
        seed: u64,
        store: &mut ParamStore,
    ) -> Result<HyperNetwork> {
        let h = encoder.hidden_dim;
        let HyperNetShape { bottleneck: b, width: w, cond_dim: d } = shape;
        if b == 0 || b >= h {
            return Err(Error::InvalidConfig(format!("bottleneck {b} must be in 1..{h}")));
        }
        if w == 0 || d == 0 || num_tasks == 0 {
            return Err(Error::InvalidConfig("hypernetwork width, condition size and task count must be positive".into()));
        }
        let prefix = format!("hypernet.{}", encoder.modality.name());
        let mut r = rng::seeded(seed);
        let add = |store: &mut ParamStore, name: &str, shape: &[usize], data: Vec<f64>| {
            store.add(format!("{prefix}.{name}"), ParamGroup::Hypernet, Tensor::new(shape, data).expect("shape"))
        };
        let task_emb = add(store, "task_emb", &[num_tasks, d], rng::gaussian(&mut r, num_tasks * d, COND_INIT_STD));
        let layer_emb = add(
            store,
            "layer_emb",
            &[encoder.num_layers, d],
            rng::gaussian(&mut r, encoder.num_layers * d, COND_INIT_STD),
        );
        let pos_emb = add(
            store,
            "pos_emb",
            &[POSITIONS_PER_LAYER, d],
            rng::gaussian(&mut r, POSITIONS_PER_LAYER * d, COND_INIT_STD),
        );
        // Condition entries are ~0.02; scale the body so its pre-activations are O(1).
        let body_std = 1.0 / (COND_INIT_STD * libm::sqrt(3.0 * d as f64));
        let body_w = add(store, "body.w", &[3 * d, w], rng::gaussian(&mut r, 3 * d * w, body_std));
        let body_b = add(store, "body.b", &[w], rng::gaussian(&mut r, w, 0.5));

        let head_std = 1.0 / libm::sqrt(w as f64);
        let block_specs: [(&str, usize, f64, f64, f64); BLOCKS] = [
            // name, size, head weight std, bias mean, bias std
            ("down_weight", h * b, 0.5 * head_std / libm::sqrt(h as f64), 0.0, 1.0 / libm::sqrt(h as f64)),
            ("down_bias", b, 0.1 * head_std, 0.0, 0.0),
            ("up_weight", b * h, 0.01 * head_std, 0.0, 0.0),
            ("up_bias", h, 0.01 * head_std, 0.0, 0.0),
            ("ln_gain", h, 0.05 * head_std, 1.0, 0.0),
            ("ln_bias", h, 0.05 * head_std, 0.0, 0.0),
        ];
        let heads = block_specs.map(|(name, size, w_std, b_mean, b_std)| {
            let weight = add(store, &format!("head.{name}.w"), &[w, size], rng::gaussian(&mut r, w * size, w_std));
            let bias: Vec<f64> = if b_std > 0.0 {
                rng::gaussian(&mut r, size, b_std).into_iter().map(|x| x + b_mean).collect()
            } else {
                alloc::vec![b_mean; size]
            };
            let bias = add(store, &format!("head.{name}.b"), &[size], bias);
            (weight, bias)
        });
        Ok(HyperNetwork {
            modality: encoder.modality,
            hidden: h,
            shape,
            num_tasks,
            num_layers: encoder.num_layers,
            task_emb,
            layer_emb,
            pos_emb,
            body_w,
            body_b,
            heads,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn shape(&self) -> HyperNetShape {
        self.shape
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.task_emb, self.layer_emb, self.pos_emb, self.body_w, self.body_b];
        for (w, b) in self.heads {
            ids.push(w);
            ids.push(b);
        }
        ids
    }

    fn block_shapes(&self) -> [[usize; 2]; BLOCKS] {
        let (h, b) = (self.hidden, self.shape.bottleneck);
        [[h, b], [1, b], [b, h], [1, h], [1, h], [1, h]]
    }

    /// Adapter weights for the listed `(layer, position)` sites of `task`,
    /// generated in one batched pass.
    pub fn generate_sites<'t>(
        &self,
        bound: &Bound<'t>,
        task: usize,
        sites: &[(usize, usize)],
    ) -> Result<Vec<AdapterVars<'t>>> {
        if task >= self.num_tasks {
            return Err(Error::UnknownId { kind: "task", id: task });
        }
        for &(layer, position) in sites {
            if layer >= self.num_layers {
                return Err(Error::UnknownId { kind: "layer", id: layer });
            }
            if position >= POSITIONS_PER_LAYER {
                return Err(Error::UnknownId { kind: "adapter position", id: position });
            }
        }
        let task_rows: Vec<usize> = alloc::vec![task; sites.len()];
        let layer_rows: Vec<usize> = sites.iter().map(|s| s.0).collect();
        let pos_rows: Vec<usize> = sites.iter().map(|s| s.1).collect();
        let cond = bound
            .var(self.task_emb)
            .gather_rows(&task_rows)?
            .concat_cols(bound.var(self.layer_emb).gather_rows(&layer_rows)?)?
            .concat_cols(bound.var(self.pos_emb).gather_rows(&pos_rows)?)?;
        let hidden = cond.matmul(bound.var(self.body_w))?.add_row(bound.var(self.body_b))?.tanh()?;
        let mut blocks: Vec<Var<'t>> = Vec::with_capacity(BLOCKS);
        for (w, b) in self.heads {
            blocks.push(hidden.matmul(bound.var(w))?.add_row(bound.var(b))?);
        }
        let shapes = self.block_shapes();
        let mut out = Vec::with_capacity(sites.len());
        for s in 0..sites.len() {
            let pick = |k: usize| -> Result<Var<'t>> {
                let row = blocks[k].slice_rows(s, 1)?;
                if shapes[k][0] == 1 {
                    row.reshape(&[shapes[k][1]])
                } else {
                    row.reshape(&shapes[k])
                }
            };
            out.push(AdapterVars {
                down_weight: pick(0)?,
                down_bias: pick(1)?,
                up_weight: pick(2)?,
                up_bias: pick(3)?,
                ln_gain: pick(4)?,
                ln_bias: pick(5)?,
            });
        }
        Ok(out)
    }

    /// Adapters for every site of the encoder, in site order.
    pub fn generate_all<'t>(&self, bound: &Bound<'t>, task: usize) -> Result<Vec<AdapterVars<'t>>> {
        let sites: Vec<(usize, usize)> = (0..self.num_layers)
            .flat_map(|l| (0..POSITIONS_PER_LAYER).map(move |p| (l, p)))
            .collect();
        self.generate_sites(bound, task, &sites)
    }

    /// Concrete adapter weights for one site.
    pub fn generate_adapters(
        &self,
        store: &ParamStore,
        task: usize,
        layer: usize,
        position: usize,
    ) -> Result<AdapterParams> {
        let tape = Tape::new();
        let bound = store.bind(&tape, |_| false);
        let vars = self.generate_sites(&bound, task, &[(layer, position)])?;
        Ok(vars[0].values())
    }
}

/// Per-modality linear maps into the shared contrastive space.
#[derive(Debug, Clone)]
pub struct Projections {
    shared_dim: usize,
    text_dim: usize,
    image_dim: usize,
    text_w: ParamId,
    text_b: ParamId,
    image_w: ParamId,
    image_b: ParamId,
}

impl Projections {
    /// The text map starts as the identity when dimensions allow it.
    pub fn build(text_dim: usize, image_dim: usize, shared_dim: usize, seed: u64, store: &mut ParamStore) -> Projections {
        let mut r = rng::seeded(seed);
        let text_init = if text_dim == shared_dim {
            Tensor::identity(shared_dim).into_data()
        } else {
            rng::gaussian(&mut r, text_dim * shared_dim, 1.0 / libm::sqrt(text_dim as f64))
        };
        let image_init = rng::gaussian(&mut r, image_dim * shared_dim, 1.0 / libm::sqrt(image_dim as f64));
        let g = ParamGroup::Projection;
        let text_w = store.add("proj.text.w", g, Tensor::new(&[text_dim, shared_dim], text_init).expect("shape"));
        let text_b = store.add("proj.text.b", g, Tensor::zeros(&[shared_dim]));
        let image_w = store.add("proj.image.w", g, Tensor::new(&[image_dim, shared_dim], image_init).expect("shape"));
        let image_b = store.add("proj.image.b", g, Tensor::zeros(&[shared_dim]));
        Projections { shared_dim, text_dim, image_dim, text_w, text_b, image_w, image_b }
    }

    pub fn shared_dim(&self) -> usize {
        self.shared_dim
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.text_w, self.text_b, self.image_w, self.image_b]
    }

    pub fn param_count(text_dim: usize, image_dim: usize, shared_dim: usize) -> usize {
        (text_dim + image_dim + 2) * shared_dim
    }

    /// Projects whichever modalities are present; the fused projection is the
    /// sum of the per-modality maps applied to each block.
    pub fn forward<'t>(&self, bound: &Bound<'t>, text: Option<Var<'t>>, image: Option<Var<'t>>) -> Result<Var<'t>> {
        let t = text
            .map(|t| t.matmul(bound.var(self.text_w))?.add_row(bound.var(self.text_b)))
            .transpose()?;
        let i = image
            .map(|i| i.matmul(bound.var(self.image_w))?.add_row(bound.var(self.image_b)))
            .transpose()?;
        match (t, i) {
            (Some(t), Some(i)) => t.add(i),
            (Some(t), None) => Ok(t),
            (None, Some(i)) => Ok(i),
            (None, None) => Err(Error::ModalityMismatch("projection needs at least one modality")),
        }
    }

    /// Projects a single embedding into the shared space.
    pub fn project(&self, store: &ParamStore, embedding: &Embedding) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = store.bind(&tape, |_| false);
        let v = embedding.vector.data();
        let row = |data: &[f64]| tape.constant(Tensor::matrix(1, data.len(), data.to_vec()).expect("row"));
        let dim_err = |want: usize| Error::ShapeMismatch {
            op: "projection_head",
            left: alloc::vec![want],
            right: alloc::vec![v.len()],
        };
        let out = match embedding.kind {
            EmbeddingKind::Text if v.len() == self.text_dim => self.forward(&bound, Some(row(v)), None)?,
            EmbeddingKind::Image if v.len() == self.image_dim => self.forward(&bound, None, Some(row(v)))?,
            EmbeddingKind::Fused if v.len() == self.text_dim + self.image_dim => self.forward(
                &bound,
                Some(row(&v[..self.text_dim])),
                Some(row(&v[self.text_dim..])),
            )?,
            EmbeddingKind::Text => return Err(dim_err(self.text_dim)),
            EmbeddingKind::Image => return Err(dim_err(self.image_dim)),
            EmbeddingKind::Fused => return Err(dim_err(self.text_dim + self.image_dim)),
        };
        Ok(Tensor::vector(out.value().into_data()))
    }
}

/// Trainable versus frozen parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub trainable_param_count: usize,
    pub frozen_param_count: usize,
    pub fraction: f64,
}

impl BudgetReport {
    pub fn new(trainable: usize, frozen: usize) -> Self {
        BudgetReport {
            trainable_param_count: trainable,
            frozen_param_count: frozen,
            fraction: trainable as f64 / (trainable + frozen) as f64,
        }
    }
}

/// Everything that determines the budget besides the hypernetwork shape.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetTemplate {
    pub text: EncoderSpec,
    pub vision: EncoderSpec,
    pub num_tasks: usize,
    pub cond_dim: usize,
    pub shared_dim: usize,
}

impl BudgetTemplate {
    pub fn report(&self, shape: HyperNetShape) -> BudgetReport {
        let frozen = self.text.param_count() + self.vision.param_count();
        let trainable = shape.param_count(&self.text, self.num_tasks)
            + shape.param_count(&self.vision, self.num_tasks)
            + Projections::param_count(self.text.output_dim, self.vision.output_dim, self.shared_dim);
        BudgetReport::new(trainable, frozen)
    }

    fn max_bottleneck(&self) -> usize {
        self.text.hidden_dim.min(self.vision.hidden_dim) - 1
    }

    /// Candidate shapes in increasing size: bottleneck `b`, width `2b`.
    pub fn ladder(&self) -> impl Iterator<Item = HyperNetShape> + '_ {
        (1..=self.max_bottleneck()).map(move |b| HyperNetShape {
            bottleneck: b,
            width: 2 * b,
            cond_dim: self.cond_dim,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetChoice {
    pub shape: HyperNetShape,
    pub report: BudgetReport,
}

/// Largest hypernetwork on the candidate ladder whose trainable fraction is
/// at most `target_fraction`.
pub fn configure_budget(template: &BudgetTemplate, target_fraction: f64) -> Result<BudgetChoice> {
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("budget fraction {target_fraction} outside (0, 1)")));
    }
    let mut best = None;
    for shape in template.ladder() {
        let report = template.report(shape);
        if report.fraction <= target_fraction {
            best = Some(BudgetChoice { shape, report });
        } else {
            break;
        }
    }
    best.ok_or_else(|| Error::NoFeasibleBudget {
        target: target_fraction,
        minimum: template.ladder().next().map(|s| template.report(s).fraction).unwrap_or(1.0),
    })
}

/// Convenience for tests and tools: the adapter-site list of an encoder.
pub fn all_sites(encoder: &Encoder) -> Vec<(usize, usize)> {
    (0..encoder.num_sites())
        .map(|s| (s / POSITIONS_PER_LAYER, s % POSITIONS_PER_LAYER))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{build_encoder, EncoderInput, SizeClass};
    use alloc::vec;

    fn tiny_spec() -> EncoderSpec {
        EncoderSpec {
            modality: Modality::Text,
            input_dim: 32,
            hidden_dim: 8,
            num_layers: 2,
            output_dim: 6,
            weight_seed: 3,
            size_class: SizeClass::Base,
        }
    }

    fn template() -> BudgetTemplate {
        BudgetTemplate {
            text: EncoderSpec::text(SizeClass::Base),
            vision: EncoderSpec::vision(SizeClass::Base),
            num_tasks: 6,
            cond_dim: 16,
            shared_dim: 64,
        }
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let spec = tiny_spec();
        let (enc, store) = build_encoder(&spec).unwrap();
        let adapters: Vec<AdapterParams> = (0..enc.num_sites())
            .map(|s| AdapterParams::zero_output(spec.hidden_dim, 3, s as u64))
            .collect();
        let toks = vec![vec![1u32, 4, 7], vec![2, 2, 30]];
        let plain = enc.encode_batch(&store, EncoderInput::Tokens(&toks), None).unwrap();
        let adapted = enc.encode_batch(&store, EncoderInput::Tokens(&toks), Some(&adapters)).unwrap();
        assert_eq!(plain, adapted);
        assert!(matches!(
            enc.encode_batch(&store, EncoderInput::Tokens(&toks), Some(&adapters[..1])),
            Err(Error::AdapterSiteCount { .. })
        ));
    }

    #[test]
    fn generation_is_deterministic_and_task_specific() {
        let spec = tiny_spec();
        let mut store = ParamStore::new();
        let shape = HyperNetShape { bottleneck: 3, width: 5, cond_dim: 4 };
        let hn = HyperNetwork::build(&spec, shape, 3, 11, &mut store).unwrap();
        let a = hn.generate_adapters(&store, 0, 1, 0).unwrap();
        let b = hn.generate_adapters(&store, 0, 1, 0).unwrap();
        assert_eq!(a, b);
        let c = hn.generate_adapters(&store, 1, 1, 0).unwrap();
        assert!(a.max_abs_diff(&c) > 0.0);
        assert_eq!(a.down_weight.shape(), &[8, 3]);
        assert_eq!(a.up_weight.shape(), &[3, 8]);
        assert!(matches!(hn.generate_adapters(&store, 3, 0, 0), Err(Error::UnknownId { kind: "task", .. })));
        assert!(hn.generate_adapters(&store, 0, 2, 0).is_err());
        assert!(hn.generate_adapters(&store, 0, 0, 2).is_err());
    }

    #[test]
    fn hypernet_size_grows_only_with_task_table() {
        let spec = tiny_spec();
        let shape = HyperNetShape { bottleneck: 3, width: 5, cond_dim: 4 };
        let mut one = ParamStore::new();
        HyperNetwork::build(&spec, shape, 1, 1, &mut one).unwrap();
        let mut many = ParamStore::new();
        HyperNetwork::build(&spec, shape, 9, 1, &mut many).unwrap();
        let diff = many.element_count(|_| true) - one.element_count(|_| true);
        assert_eq!(diff, 8 * shape.cond_dim);
        assert_eq!(one.element_count(|_| true), shape.param_count(&spec, 1));
    }

    #[test]
    fn projections_have_declared_output_and_identity_text_map() {
        let mut store = ParamStore::new();
        let proj = Projections::build(64, 96, 64, 5, &mut store);
        let t = Embedding { vector: Tensor::vector((0..64).map(|x| x as f64 * 0.1).collect()), kind: EmbeddingKind::Text, task_id: None };
        let i = Embedding { vector: Tensor::vector(vec![0.5; 96]), kind: EmbeddingKind::Image, task_id: None };
        let pt = proj.project(&store, &t).unwrap();
        assert_eq!(pt, t.vector);
        assert_eq!(proj.project(&store, &i).unwrap().len(), 64);
        let bad = Embedding { vector: Tensor::vector(vec![1.0; 10]), kind: EmbeddingKind::Text, task_id: None };
        assert!(proj.project(&store, &bad).is_err());
    }

    #[test]
    fn budget_targets() {
        let tpl = template();
        let ten = configure_budget(&tpl, 0.10).unwrap();
        assert!(ten.report.fraction > 0.05 && ten.report.fraction <= 0.10, "{ten:?}");
        let five = configure_budget(&tpl, 0.05).unwrap();
        assert!(five.report.fraction <= 0.05);
        assert_ne!(five.shape, ten.shape);
        assert!(matches!(configure_budget(&tpl, 0.001), Err(Error::NoFeasibleBudget { .. })));
        assert!(configure_budget(&tpl, 1.5).is_err());
    }
}
