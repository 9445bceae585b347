use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::float::Float;
use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::vocab::NUM_SPECIALS;

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Share one embedding matrix between source and target (requires equal
    /// vocabularies). Off by default.
    pub tied_embeddings: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            src_vocab: 0,
            tgt_vocab: 0,
            tied_embeddings: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 {
            return Err(Error::Invalid("layers and d_ff must be positive".into()));
        }
        if self.src_vocab <= NUM_SPECIALS || self.tgt_vocab <= NUM_SPECIALS {
            return Err(Error::Invalid(format!(
                "vocabularies need at least {} entries (specials plus content), got {} / {}",
                NUM_SPECIALS + 1,
                self.src_vocab,
                self.tgt_vocab
            )));
        }
        if self.tied_embeddings && self.src_vocab != self.tgt_vocab {
            return Err(Error::Invalid("tied embeddings need equal vocabularies".into()));
        }
        Ok(())
    }
}

/// Named parameter groups; every tensor belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    SourceEmbedding,
    EncoderSelfAttention,
    EncoderFeedforward,
    TargetEmbedding,
    DecoderSelfAttention,
    DecoderEncdecAttention,
    DecoderFeedforward,
    OutputLayer,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::SourceEmbedding,
        Component::EncoderSelfAttention,
        Component::EncoderFeedforward,
        Component::TargetEmbedding,
        Component::DecoderSelfAttention,
        Component::DecoderEncdecAttention,
        Component::DecoderFeedforward,
        Component::OutputLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::SourceEmbedding => "source_embedding",
            Component::EncoderSelfAttention => "encoder.self_attention",
            Component::EncoderFeedforward => "encoder.feedforward",
            Component::TargetEmbedding => "target_embedding",
            Component::DecoderSelfAttention => "decoder.self_attention",
            Component::DecoderEncdecAttention => "decoder.encdec_attention",
            Component::DecoderFeedforward => "decoder.feedforward",
            Component::OutputLayer => "output_layer",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of frozen components. Parses comma-separated names; `encoder.*` and
/// `decoder.*` expand to every sub-component.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeMask {
    frozen: BTreeSet<Component>,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            frozen: Component::ALL.into_iter().collect(),
        }
    }

    pub fn from_components(c: impl IntoIterator<Item = Component>) -> Self {
        Self {
            frozen: c.into_iter().collect(),
        }
    }

    pub fn contains(&self, c: Component) -> bool {
        self.frozen.contains(&c)
    }

    pub fn components(&self) -> impl Iterator<Item = Component> + '_ {
        self.frozen.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn parse_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut frozen = BTreeSet::new();
        for name in names {
            let name = name.as_ref().trim();
            let matched: Vec<Component> = match name {
                "" => continue,
                "all" | "*" => Component::ALL.to_vec(),
                "encoder" | "encoder.*" => vec![Component::EncoderSelfAttention, Component::EncoderFeedforward],
                "decoder" | "decoder.*" => vec![
                    Component::DecoderSelfAttention,
                    Component::DecoderEncdecAttention,
                    Component::DecoderFeedforward,
                ],
                other => Component::ALL
                    .into_iter()
                    .filter(|c| c.name() == other)
                    .collect(),
            };
            if matched.is_empty() {
                return Err(Error::Invalid(format!("unknown model component `{name}`")));
            }
            frozen.extend(matched);
        }
        Ok(Self { frozen })
    }
}

impl FromStr for FreezeMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let names: Vec<&str> = s.split(',').collect();
        Self::parse_names(&names)
    }
}

impl Serialize for FreezeMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let names: Vec<&str> = self.frozen.iter().map(|c| c.name()).collect();
        names.serialize(s)
    }
}

impl<'de> Deserialize<'de> for FreezeMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        Self::parse_names(&names).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub component: Component,
    pub(crate) init: Init,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayerIdx {
    pub norm1: NormIdx,
    pub attn: AttnIdx,
    pub norm2: NormIdx,
    pub ff: FfIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayerIdx {
    pub norm1: NormIdx,
    pub self_attn: AttnIdx,
    pub norm2: NormIdx,
    pub cross_attn: AttnIdx,
    pub norm3: NormIdx,
    pub ff: FfIdx,
}

/// Tensor order, names and component assignment for a configuration.
///
/// Layer norms belong to the sub-layer they feed; each stack's final norm
/// belongs to that stack's feedforward component.
#[derive(Debug, Clone)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    pub(crate) src_emb: usize,
    pub(crate) tgt_emb: usize,
    pub(crate) enc: Vec<EncLayerIdx>,
    pub(crate) enc_norm: NormIdx,
    pub(crate) dec: Vec<DecLayerIdx>,
    pub(crate) dec_norm: NormIdx,
    pub(crate) out_w: usize,
    pub(crate) out_b: usize,
}

struct Builder {
    specs: Vec<TensorSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: (usize, usize), component: Component, init: Init) -> usize {
        self.specs.push(TensorSpec {
            name,
            shape,
            component,
            init,
        });
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize, c: Component) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{prefix}.gain"), (1, d), c, Init::Ones),
            bias: self.add(format!("{prefix}.bias"), (1, d), c, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, c: Component) -> AttnIdx {
        let mut pair = |n: &str| {
            (
                self.add(format!("{prefix}.w{n}"), (d, d), c, Init::Xavier),
                self.add(format!("{prefix}.b{n}"), (1, d), c, Init::Zeros),
            )
        };
        let (wq, bq) = pair("q");
        let (wk, bk) = pair("k");
        let (wv, bv) = pair("v");
        let (wo, bo) = pair("o");
        AttnIdx {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, d_ff: usize, c: Component) -> FfIdx {
        FfIdx {
            w1: self.add(format!("{prefix}.w1"), (d, d_ff), c, Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), (1, d_ff), c, Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), (d_ff, d), c, Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), (1, d), c, Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(h: &HyperParams) -> Self {
        use Component::*;
        let d = h.d_model;
        let mut b = Builder { specs: Vec::new() };
        let src_emb = b.add("source_embedding".into(), (h.src_vocab, d), SourceEmbedding, Init::Embedding);
        let tgt_emb = if h.tied_embeddings {
            src_emb
        } else {
            b.add("target_embedding".into(), (h.tgt_vocab, d), TargetEmbedding, Init::Embedding)
        };
        let enc = (0..h.layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncLayerIdx {
                    norm1: b.norm(&format!("{p}.self_attention.norm"), d, EncoderSelfAttention),
                    attn: b.attn(&format!("{p}.self_attention"), d, EncoderSelfAttention),
                    norm2: b.norm(&format!("{p}.feedforward.norm"), d, EncoderFeedforward),
                    ff: b.ff(&format!("{p}.feedforward"), d, h.d_ff, EncoderFeedforward),
                }
            })
            .collect();
        let enc_norm = b.norm("encoder.final_norm", d, EncoderFeedforward);
        let dec = (0..h.layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecLayerIdx {
                    norm1: b.norm(&format!("{p}.self_attention.norm"), d, DecoderSelfAttention),
                    self_attn: b.attn(&format!("{p}.self_attention"), d, DecoderSelfAttention),
                    norm2: b.norm(&format!("{p}.encdec_attention.norm"), d, DecoderEncdecAttention),
                    cross_attn: b.attn(&format!("{p}.encdec_attention"), d, DecoderEncdecAttention),
                    norm3: b.norm(&format!("{p}.feedforward.norm"), d, DecoderFeedforward),
                    ff: b.ff(&format!("{p}.feedforward"), d, h.d_ff, DecoderFeedforward),
                }
            })
            .collect();
        let dec_norm = b.norm("decoder.final_norm", d, DecoderFeedforward);
        let out_w = b.add("output_layer.weight".into(), (d, h.tgt_vocab), OutputLayer, Init::Xavier);
        let out_b = b.add("output_layer.bias".into(), (1, h.tgt_vocab), OutputLayer, Init::Zeros);
        Self {
            specs: b.specs,
            src_emb,
            tgt_emb,
            enc,
            enc_norm,
            dec,
            dec_norm,
            out_w,
            out_b,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// All transformer weights as an ordered list of named tensors.
#[derive(Debug, Clone)]
pub struct ModelParams<F: Float = f32> {
    pub(crate) hyper: HyperParams,
    pub(crate) layout: Layout,
    pub(crate) tensors: Vec<Array2<F>>,
}

impl<F: Float> PartialEq for ModelParams<F> {
    fn eq(&self, other: &Self) -> bool {
        self.hyper == other.hyper && self.tensors == other.tensors
    }
}

/// Deterministic initialization: embeddings uniform in `±sqrt(3/D)`,
/// matrices Xavier-uniform, biases zero, norm gains one.
pub fn init_model<F: Float>(hyper: HyperParams, seed: u64) -> Result<ModelParams<F>> {
    hyper.validate()?;
    let layout = Layout::new(&hyper);
    let mut rng = derived_rng(seed, &[0x1a17]);
    let tensors = layout
        .specs
        .iter()
        .map(|spec| {
            let (r, c) = spec.shape;
            match spec.init {
                Init::Zeros => Array2::zeros((r, c)),
                Init::Ones => Array2::ones((r, c)),
                Init::Embedding | Init::Xavier => {
                    let limit = if spec.init == Init::Embedding {
                        (3.0 / c as f64).sqrt()
                    } else {
                        (6.0 / (r + c) as f64).sqrt()
                    };
                    Array2::from_shape_fn((r, c), |_| F::of(rng.random_range(-limit..limit)))
                }
            }
        })
        .collect();
    Ok(ModelParams {
        hyper,
        layout,
        tensors,
    })
}

impl<F: Float> ModelParams<F> {
    pub fn from_tensors(hyper: HyperParams, tensors: Vec<Array2<F>>) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        if tensors.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (spec, t) in layout.specs.iter().zip(&tensors) {
            if t.dim() != spec.shape {
                return Err(Error::Dimension(format!(
                    "{} has shape {:?}, expected {:?}",
                    spec.name,
                    t.dim(),
                    spec.shape
                )));
            }
        }
        Ok(Self {
            hyper,
            layout,
            tensors,
        })
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Array2<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<F>> {
        self.layout
            .specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn source_embedding(&self) -> &Array2<F> {
        &self.tensors[self.layout.src_emb]
    }

    pub fn target_embedding(&self) -> &Array2<F> {
        &self.tensors[self.layout.tgt_emb]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Tensor indices belonging to a component.
    pub fn component_indices(&self, c: Component) -> Vec<usize> {
        self.layout
            .specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.component == c)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        ModelParams {
            hyper: self.hyper,
            layout: self.layout.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| G::of(v.as_f64())))
                .collect(),
        }
    }

    /// Replaces the source embedding (and the source vocabulary size).
    pub fn with_source_embedding(&self, emb: Array2<F>) -> Result<Self> {
        if emb.ncols() != self.hyper.d_model {
            return Err(Error::Dimension(format!(
                "embedding dimension {} != model dimension {}",
                emb.ncols(),
                self.hyper.d_model
            )));
        }
        if self.hyper.tied_embeddings {
            return Err(Error::Invalid("cannot replace the source embedding of a tied model".into()));
        }
        let mut hyper = self.hyper;
        hyper.src_vocab = emb.nrows();
        let mut tensors = self.tensors.clone();
        tensors[self.layout.src_emb] = emb;
        Self::from_tensors(hyper, tensors)
    }
}

/// Closed-form parameter count for a configuration.
pub fn parameter_count(h: &HyperParams) -> usize {
    let d = h.d_model;
    let attn = 4 * (d * d + d);
    let ff = d * h.d_ff + h.d_ff + h.d_ff * d + d;
    let norm = 2 * d;
    let emb = if h.tied_embeddings {
        h.src_vocab * d
    } else {
        (h.src_vocab + h.tgt_vocab) * d
    };
    let enc = h.layers * (2 * norm + attn + ff) + norm;
    let dec = h.layers * (3 * norm + 2 * attn + ff) + norm;
    emb + enc + dec + d * h.tgt_vocab + h.tgt_vocab
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp() -> HyperParams {
        HyperParams {
            layers: 2,
            d_model: 16,
            heads: 4,
            d_ff: 32,
            src_vocab: 20,
            tgt_vocab: 24,
            tied_embeddings: false,
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_model::<f32>(hp(), 3).unwrap();
        let b = init_model::<f32>(hp(), 3).unwrap();
        assert_eq!(a, b);
        let c = init_model::<f32>(hp(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_by_hand() {
        // d=16, d_ff=32, V_s=20, V_t=24, 2 layers:
        // attention 4*(256+16)=1088, feedforward 512+32+512+16=1072, norm 32
        // encoder layer 2*32+1088+1072=2224, decoder layer 3*32+2*1088+1072=3344
        // embeddings (20+24)*16=704, output 16*24+24=408
        // total 704 + 2*2224+32 + 2*3344+32 + 408 = 12312
        let m = init_model::<f32>(hp(), 1).unwrap();
        assert_eq!(m.num_parameters(), 12312);
        assert_eq!(parameter_count(&hp()), 12312);
    }

    #[test]
    fn embeddings_are_untied_storage() {
        let mut h = hp();
        h.tgt_vocab = h.src_vocab;
        let m = init_model::<f32>(h, 1).unwrap();
        assert_ne!(m.layout.src_emb, m.layout.tgt_emb);
        assert_ne!(m.source_embedding(), m.target_embedding());
    }

    #[test]
    fn tied_mode_shares_one_tensor() {
        let mut h = hp();
        h.tgt_vocab = h.src_vocab;
        h.tied_embeddings = true;
        let m = init_model::<f32>(h, 1).unwrap();
        assert_eq!(m.layout.src_emb, m.layout.tgt_emb);
        assert_eq!(m.num_parameters(), parameter_count(&h));
    }

    #[test]
    fn heads_must_divide_dimension() {
        let mut h = hp();
        h.heads = 3;
        assert!(init_model::<f32>(h, 1).is_err());
    }

    #[test]
    fn tiny_vocab_rejected() {
        let mut h = hp();
        h.src_vocab = 4;
        assert!(init_model::<f32>(h, 1).is_err());
    }

    #[test]
    fn components_partition_tensors() {
        let m = init_model::<f32>(hp(), 1).unwrap();
        let mut seen = vec![0; m.tensors().len()];
        for c in Component::ALL {
            for i in m.component_indices(c) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n == 1));
        for c in Component::ALL {
            assert!(!m.component_indices(c).is_empty(), "{c}");
        }
    }

    #[test]
    fn freeze_mask_parsing() {
        let f: FreezeMask = "target_embedding,decoder.self_attention".parse().unwrap();
        assert!(f.contains(Component::TargetEmbedding));
        assert!(f.contains(Component::DecoderSelfAttention));
        assert!(!f.contains(Component::DecoderFeedforward));
        let e: FreezeMask = "encoder.*".parse().unwrap();
        assert_eq!(e.components().count(), 2);
        assert!("decoder.nonsense".parse::<FreezeMask>().is_err());
    }
}
