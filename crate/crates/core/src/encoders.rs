//! Frozen modality encoders and multimodal fusion.
//!
//! Each encoder is a residual MLP stack. Layer `l` computes
//! `u = tanh(layernorm(h·W + b))`, passes `u` through the adapter at site
//! `(l, 0)`, adds it to `h`, then applies the adapter at site `(l, 1)`.
//! Text inputs are mean-pooled token embeddings; image inputs are flattened
//! feature grids passed through a tanh stem.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypernet::{AdapterParams, AdapterVars};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, Digest32, ParamGroup, ParamId, ParamStore};
use crate::rng;

/// Adapter insertion points per encoder layer.
pub const POSITIONS_PER_LAYER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "vision",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Base,
    Small,
}

/// Image grid: 8×8 cells, 3 channels.
pub const GRID_SIDE: usize = 8;
pub const GRID_CHANNELS: usize = 3;
pub const GRID_LEN: usize = GRID_SIDE * GRID_SIDE * GRID_CHANNELS;
pub const TEXT_VOCAB: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub modality: Modality,
    /// Vocabulary size for text, flattened grid length for images.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub output_dim: usize,
    pub weight_seed: u64,
    pub size_class: SizeClass,
}

impl EncoderSpec {
    pub fn text(size: SizeClass) -> Self {
        let (hidden_dim, num_layers) = match size {
            SizeClass::Base => (64, 4),
            SizeClass::Small => (28, 4),
        };
        EncoderSpec {
            modality: Modality::Text,
            input_dim: TEXT_VOCAB,
            hidden_dim,
            num_layers,
            output_dim: 64,
            weight_seed: 0x7e47,
            size_class: size,
        }
    }

    pub fn vision(size: SizeClass) -> Self {
        let (hidden_dim, num_layers) = match size {
            SizeClass::Base => (96, 4),
            SizeClass::Small => (36, 3),
        };
        EncoderSpec {
            modality: Modality::Image,
            input_dim: GRID_LEN,
            hidden_dim,
            num_layers,
            output_dim: 96,
            weight_seed: 0x0151,
            size_class: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "{} encoder dimensions must be positive",
                self.modality.name()
            )));
        }
        Ok(())
    }

    pub fn num_sites(&self) -> usize {
        self.num_layers * POSITIONS_PER_LAYER
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        let stem = match self.modality {
            Modality::Text => self.input_dim * h,
            Modality::Image => self.input_dim * h + h,
        };
        stem + self.num_layers * (h * h + 3 * h) + h * self.output_dim + self.output_dim
    }
}

/// Input batch for one encoder.
#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a> {
    Tokens(&'a [Vec<u32>]),
    Grids(&'a [Vec<f64>]),
}

impl EncoderInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            EncoderInput::Tokens(t) => t.len(),
            EncoderInput::Grids(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    w: ParamId,
    b: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

/// Encoder architecture plus handles to its weights in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    prefix: String,
    stem_w: ParamId,
    stem_b: Option<ParamId>,
    layers: Vec<LayerIds>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Named encoder weights with a content digest.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWeights {
    pub tensors: Vec<(String, Tensor)>,
    pub content_digest: Digest32,
}

impl Encoder {
    /// Registers seeded weights for `spec` in `store`.
    pub fn build(spec: &EncoderSpec, store: &mut ParamStore) -> Result<Encoder> {
        spec.validate()?;
        let prefix = String::from(spec.modality.name());
        let mut rng = rng::seeded(spec.weight_seed);
        let h = spec.hidden_dim;
        let add = |store: &mut ParamStore, name: &str, shape: &[usize], data: Vec<f64>| {
            store.add(format!("{prefix}.{name}"), ParamGroup::Encoder, Tensor::new(shape, data).expect("shape"))
        };
        let (stem_w, stem_b) = match spec.modality {
            Modality::Text => {
                let w = rng::gaussian(&mut rng, spec.input_dim * h, 1.0);
                (add(store, "embed", &[spec.input_dim, h], w), None)
            }
            Modality::Image => {
                let std = 1.0 / libm::sqrt(spec.input_dim as f64);
                let w = rng::gaussian(&mut rng, spec.input_dim * h, std);
                let w = add(store, "stem.w", &[spec.input_dim, h], w);
                let b = add(store, "stem.b", &[h], alloc::vec![0.0; h]);
                (w, Some(b))
            }
        };
        let layer_std = 1.0 / libm::sqrt(h as f64);
        let layers = (0..spec.num_layers)
            .map(|l| LayerIds {
                w: add(store, &format!("layer{l}.w"), &[h, h], rng::gaussian(&mut rng, h * h, layer_std)),
                b: add(store, &format!("layer{l}.b"), &[h], alloc::vec![0.0; h]),
                ln_gain: add(store, &format!("layer{l}.ln_gain"), &[h], alloc::vec![1.0; h]),
                ln_bias: add(store, &format!("layer{l}.ln_bias"), &[h], alloc::vec![0.0; h]),
            })
            .collect();
        let out_w = add(
            store,
            "out.w",
            &[h, spec.output_dim],
            rng::gaussian(&mut rng, h * spec.output_dim, layer_std),
        );
        let out_b = add(store, "out.b", &[spec.output_dim], alloc::vec![0.0; spec.output_dim]);
        Ok(Encoder {
            spec: spec.clone(),
            prefix,
            stem_w,
            stem_b,
            layers,
            out_w,
            out_b,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn modality(&self) -> Modality {
        self.spec.modality
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn num_sites(&self) -> usize {
        self.spec.num_sites()
    }

    /// Index of the adapter site at (`layer`, `position`).
    pub fn site(layer: usize, position: usize) -> usize {
        layer * POSITIONS_PER_LAYER + position
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.stem_w];
        ids.extend(self.stem_b);
        for l in &self.layers {
            ids.extend([l.w, l.b, l.ln_gain, l.ln_bias]);
        }
        ids.extend([self.out_w, self.out_b]);
        ids
    }

    /// Whether a store entry belongs to this encoder.
    pub fn owns(&self, name: &str) -> bool {
        name.strip_prefix(self.prefix.as_str()).is_some_and(|rest| rest.starts_with('.'))
    }

    pub fn frozen_weights(&self, store: &ParamStore) -> FrozenWeights {
        let tensors = self
            .param_ids()
            .into_iter()
            .map(|id| {
                let e = store.entry(id);
                (e.name.clone(), e.tensor.clone())
            })
            .collect();
        FrozenWeights {
            tensors,
            content_digest: self.digest(store),
        }
    }

    pub fn digest(&self, store: &ParamStore) -> Digest32 {
        store.digest(|e| self.owns(&e.name))
    }

    fn check_input(&self, input: &EncoderInput<'_>) -> Result<()> {
        match (self.spec.modality, input) {
            (Modality::Text, EncoderInput::Tokens(_)) => Ok(()),
            (Modality::Image, EncoderInput::Grids(grids)) => {
                match grids.iter().find(|g| g.len() != self.spec.input_dim) {
                    Some(bad) => Err(Error::ShapeMismatch {
                        op: "encode",
                        left: alloc::vec![self.spec.input_dim],
                        right: alloc::vec![bad.len()],
                    }),
                    None => Ok(()),
                }
            }
            _ => Err(Error::ModalityMismatch("encoder input")),
        }
    }

    /// Forward pass for a batch, recorded on `tape`. Returns `[n × output_dim]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        input: EncoderInput<'_>,
        adapters: Option<&[AdapterVars<'t>]>,
    ) -> Result<Var<'t>> {
        self.check_input(&input)?;
        if let Some(a) = adapters {
            if a.len() != self.num_sites() {
                return Err(Error::AdapterSiteCount {
                    expected: self.num_sites(),
                    got: a.len(),
                });
            }
        }
        let mut hidden = match input {
            EncoderInput::Tokens(bags) => bound.var(self.stem_w).embedding_bag(bags)?,
            EncoderInput::Grids(grids) => {
                let flat: Vec<f64> = grids.iter().flat_map(|g| g.iter().copied()).collect();
                let x = tape.constant(Tensor::new(&[grids.len(), self.spec.input_dim], flat)?);
                let b = bound.var(self.stem_b.expect("image stem bias"));
                x.matmul(bound.var(self.stem_w))?.add_row(b)?.tanh()?
            }
        };
        for (l, ids) in self.layers.iter().enumerate() {
            let mut update = hidden
                .matmul(bound.var(ids.w))?
                .add_row(bound.var(ids.b))?
                .layer_norm(bound.var(ids.ln_gain), bound.var(ids.ln_bias))?
                .tanh()?;
            if let Some(a) = adapters {
                update = a[Self::site(l, 0)].apply(update)?;
            }
            hidden = hidden.add(update)?;
            if let Some(a) = adapters {
                hidden = a[Self::site(l, 1)].apply(hidden)?;
            }
        }
        hidden.matmul(bound.var(self.out_w))?.add_row(bound.var(self.out_b))
    }

    /// Gradient-free batch encoding with optional concrete adapters.
    pub fn encode_batch(
        &self,
        store: &ParamStore,
        input: EncoderInput<'_>,
        adapters: Option<&[AdapterParams]>,
    ) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = store.bind(&tape, |_| false);
        let bound_adapters: Option<Vec<AdapterVars<'_>>> =
            adapters.map(|a| a.iter().map(|p| p.bind(&tape)).collect());
        Ok(self.forward(&tape, &bound, input, bound_adapters.as_deref())?.value())
    }
}

/// Builds a standalone encoder with its own weight store.
pub fn build_encoder(spec: &EncoderSpec) -> Result<(Encoder, ParamStore)> {
    let mut store = ParamStore::new();
    let enc = Encoder::build(spec, &mut store)?;
    Ok((enc, store))
}

/// Which representation an [`Embedding`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Text,
    Image,
    Fused,
}

impl From<Modality> for EmbeddingKind {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Text => EmbeddingKind::Text,
            Modality::Image => EmbeddingKind::Image,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Tensor,
    pub kind: EmbeddingKind,
    pub task_id: Option<usize>,
}

/// Encodes one example.
pub fn encode(
    encoder: &Encoder,
    store: &ParamStore,
    input: EncoderInput<'_>,
    adapters: Option<&[AdapterParams]>,
) -> Result<Embedding> {
    if input.len() != 1 {
        return Err(Error::TooFewExamples { needed: 1, got: input.len() });
    }
    let out = encoder.encode_batch(store, input, adapters)?;
    Ok(Embedding {
        vector: Tensor::vector(out.into_data()),
        kind: encoder.modality().into(),
        task_id: None,
    })
}

/// Concatenates a text and an image embedding, text first.
pub fn fuse_multimodal(text: &Embedding, image: &Embedding) -> Result<Embedding> {
    if text.kind != EmbeddingKind::Text || image.kind != EmbeddingKind::Image {
        return Err(Error::ModalityMismatch("fusion needs one text and one image embedding"));
    }
    let mut data = text.vector.data().to_vec();
    data.extend_from_slice(image.vector.data());
    Ok(Embedding {
        vector: Tensor::vector(data),
        kind: EmbeddingKind::Fused,
        task_id: text.task_id.or(image.task_id),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ratio(a: &EncoderSpec, b: &EncoderSpec) -> f64 {
        a.param_count() as f64 / b.param_count() as f64
    }

    #[test]
    fn same_spec_same_digest() {
        let spec = EncoderSpec::text(SizeClass::Base);
        let (a, sa) = build_encoder(&spec).unwrap();
        let (b, sb) = build_encoder(&spec).unwrap();
        assert_eq!(a.digest(&sa), b.digest(&sb));
        let mut other = spec.clone();
        other.weight_seed += 1;
        let (c, sc) = build_encoder(&other).unwrap();
        assert_ne!(a.digest(&sa), c.digest(&sc));
    }

    #[test]
    fn closed_form_count_matches_store() {
        for spec in [
            EncoderSpec::text(SizeClass::Base),
            EncoderSpec::text(SizeClass::Small),
            EncoderSpec::vision(SizeClass::Base),
            EncoderSpec::vision(SizeClass::Small),
        ] {
            let (_, store) = build_encoder(&spec).unwrap();
            assert_eq!(store.element_count(|_| true), spec.param_count());
        }
    }

    #[test]
    fn small_variants_hit_size_targets() {
        let t = ratio(&EncoderSpec::text(SizeClass::Small), &EncoderSpec::text(SizeClass::Base));
        let v = ratio(&EncoderSpec::vision(SizeClass::Small), &EncoderSpec::vision(SizeClass::Base));
        assert!((t - 0.43).abs() <= 0.03, "text ratio {t}");
        assert!((v - 0.22).abs() <= 0.03, "vision ratio {v}");
    }

    #[test]
    fn rejects_bad_dimensions_and_inputs() {
        let mut spec = EncoderSpec::vision(SizeClass::Base);
        spec.hidden_dim = 0;
        assert!(build_encoder(&spec).is_err());
        let (enc, store) = build_encoder(&EncoderSpec::vision(SizeClass::Base)).unwrap();
        let bad = vec![vec![0.0; 10]];
        assert!(enc.encode_batch(&store, EncoderInput::Grids(&bad), None).is_err());
        let toks = vec![vec![1u32, 2]];
        assert!(matches!(
            enc.encode_batch(&store, EncoderInput::Tokens(&toks), None),
            Err(Error::ModalityMismatch(_))
        ));
    }

    #[test]
    fn encoding_is_deterministic() {
        let (enc, store) = build_encoder(&EncoderSpec::text(SizeClass::Base)).unwrap();
        let toks = vec![vec![5u32, 9, 12]];
        let a = encode(&enc, &store, EncoderInput::Tokens(&toks), None).unwrap();
        let b = encode(&enc, &store, EncoderInput::Tokens(&toks), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vector.len(), 64);
    }

    #[test]
    fn fusion_concatenates_text_first() {
        let t = Embedding { vector: Tensor::vector(vec![1.0; 4]), kind: EmbeddingKind::Text, task_id: None };
        let i = Embedding { vector: Tensor::vector(vec![2.0; 6]), kind: EmbeddingKind::Image, task_id: None };
        let f = fuse_multimodal(&t, &i).unwrap();
        assert_eq!(f.vector.len(), 10);
        assert_eq!(&f.vector.data()[..4], t.vector.data());
        assert!(fuse_multimodal(&t, &t).is_err());
    }
}
