//! The trainable model: input fusion of both tracks, a small bidirectional
//! pre-norm transformer, a categorical head, and a noise-predicting
//! denoising head, with exact reverse-mode gradients.

mod encoder;
mod engine;
pub mod kernels;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{
    categorical_head, denoise_head, fuse_and_encode, Context, ContextBatch, EncoderInput,
};
pub use engine::{forward_backward, DiffusionDraw, LossBreakdown, LossSpec, TrainExample};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{substream, Stream};
use crate::token_space::{ContinuousTokenSpec, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub struct_dim: usize,
    pub denoiser_hidden: usize,
    pub denoiser_layers: usize,
    pub time_embed_dim: usize,
    /// Number of DDPM steps the denoising head is conditioned on.
    pub ddpm_steps: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_hidden: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 128,
            vocab_size: 8,
            struct_dim: 4,
            denoiser_hidden: 128,
            denoiser_layers: 3,
            time_embed_dim: 32,
            ddpm_steps: 100,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_hidden == 0 || self.n_heads == 0 || !self.d_hidden.is_multiple_of(self.n_heads) {
            return bad("d_hidden must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1");
        }
        if self.max_len == 0 {
            return bad("max_len must be >= 1");
        }
        if self.denoiser_hidden == 0 || self.denoiser_layers == 0 {
            return bad("denoiser needs >= 1 layer and a positive width");
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim must be an even number >= 2");
        }
        if self.ddpm_steps == 0 {
            return bad("ddpm_steps must be >= 1");
        }
        Vocabulary::new(self.vocab_size).map_err(|e| Error::Config(e.to_string()))?;
        ContinuousTokenSpec::new(self.struct_dim).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size).expect("validated config")
    }

    pub fn ffn_hidden(&self) -> usize {
        4 * self.d_hidden
    }

    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.n_heads
    }

    pub fn denoiser_input(&self) -> usize {
        self.struct_dim + self.time_embed_dim + self.d_hidden
    }
}

/// Location of one tensor inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamClass {
    SeqEmbed,
    StructNorm,
    StructProj,
    StructMaskEmbed,
    PosEmbed,
    Attention,
    FeedForward,
    BackboneNorm,
    Projector,
    Denoiser,
}

impl ParamClass {
    pub const ALL: [ParamClass; 10] = [
        ParamClass::SeqEmbed,
        ParamClass::StructNorm,
        ParamClass::StructProj,
        ParamClass::StructMaskEmbed,
        ParamClass::PosEmbed,
        ParamClass::Attention,
        ParamClass::FeedForward,
        ParamClass::BackboneNorm,
        ParamClass::Projector,
        ParamClass::Denoiser,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Uniform with std `1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct TensorInfo {
    pub name: String,
    pub slot: Slot,
    pub class: ParamClass,
    pub init: InitKind,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

/// Affine maps of the denoising MLP, input first.
#[derive(Clone, Debug)]
pub struct DenoiserSlots {
    pub weights: Vec<Slot>,
    pub biases: Vec<Slot>,
}

/// Canonical tensor order. Checkpoints store parameters in exactly this order.
#[derive(Clone, Debug)]
pub struct Layout {
    pub seq_embed: Slot,
    pub struct_norm_g: Slot,
    pub struct_norm_b: Slot,
    pub struct_proj: Slot,
    pub struct_mask_embed: Slot,
    pub pos_embed: Slot,
    pub layers: Vec<LayerSlots>,
    pub final_g: Slot,
    pub final_b: Slot,
    pub proj_w: Slot,
    pub proj_b: Slot,
    pub denoiser: DenoiserSlots,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

struct LayoutBuilder {
    tensors: Vec<TensorInfo>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, rows: usize, cols: usize, class: ParamClass, init: InitKind) -> Slot {
        let slot = Slot { offset: self.offset, rows, cols };
        self.offset += slot.len();
        let decay = matches!(init, InitKind::Uniform { .. })
            && !matches!(class, ParamClass::StructNorm | ParamClass::BackboneNorm);
        self.tensors.push(TensorInfo { name, slot, class, init, decay });
        slot
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize, class: ParamClass) -> Slot {
        self.push(name, rows, cols, class, InitKind::Uniform { fan_in: rows })
    }

    fn bias(&mut self, name: String, cols: usize, class: ParamClass) -> Slot {
        self.push(name, 1, cols, class, InitKind::Zeros)
    }

    fn gain(&mut self, name: String, cols: usize, class: ParamClass) -> Slot {
        self.push(name, 1, cols, class, InitKind::Ones)
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        use ParamClass::*;
        let d = cfg.d_hidden;
        let v = cfg.vocab_size;
        let ds = cfg.struct_dim;
        let mut b = LayoutBuilder { tensors: Vec::new(), offset: 0 };
        let emb = InitKind::Uniform { fan_in: d };
        let seq_embed = b.push("seq_embed".into(), v + 1, d, SeqEmbed, emb);
        let struct_norm_g = b.gain("struct_norm.gain".into(), ds, StructNorm);
        let struct_norm_b = b.bias("struct_norm.bias".into(), ds, StructNorm);
        // a layer-normed token has norm sqrt(ds); scale its projection like the embeddings
        let struct_proj = b.push("struct_proj".into(), ds, d, StructProj, InitKind::Uniform { fan_in: d * ds });
        let struct_mask_embed = b.push("struct_mask_embed".into(), 1, d, StructMaskEmbed, emb);
        let pos_embed = b.push("pos_embed".into(), cfg.max_len, d, PosEmbed, emb);
        let ff = cfg.ffn_hidden();
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let n = |s: &str| format!("layers.{l}.{s}");
                LayerSlots {
                    ln1_g: b.gain(n("ln1.gain"), d, BackboneNorm),
                    ln1_b: b.bias(n("ln1.bias"), d, BackboneNorm),
                    wq: b.weight(n("attn.wq"), d, d, Attention),
                    bq: b.bias(n("attn.bq"), d, Attention),
                    wk: b.weight(n("attn.wk"), d, d, Attention),
                    bk: b.bias(n("attn.bk"), d, Attention),
                    wv: b.weight(n("attn.wv"), d, d, Attention),
                    bv: b.bias(n("attn.bv"), d, Attention),
                    wo: b.weight(n("attn.wo"), d, d, Attention),
                    bo: b.bias(n("attn.bo"), d, Attention),
                    ln2_g: b.gain(n("ln2.gain"), d, BackboneNorm),
                    ln2_b: b.bias(n("ln2.bias"), d, BackboneNorm),
                    w1: b.weight(n("ffn.w1"), d, ff, FeedForward),
                    b1: b.bias(n("ffn.b1"), ff, FeedForward),
                    w2: b.weight(n("ffn.w2"), ff, d, FeedForward),
                    b2: b.bias(n("ffn.b2"), d, FeedForward),
                }
            })
            .collect();
        let final_g = b.gain("final_norm.gain".into(), d, BackboneNorm);
        let final_b = b.bias("final_norm.bias".into(), d, BackboneNorm);
        let proj_w = b.weight("projector.w".into(), d, v, Projector);
        let proj_b = b.bias("projector.b".into(), v, Projector);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut inn = cfg.denoiser_input();
        for k in 0..cfg.denoiser_layers {
            let out = if k + 1 == cfg.denoiser_layers { ds } else { cfg.denoiser_hidden };
            weights.push(b.weight(format!("denoiser.{k}.w"), inn, out, Denoiser));
            biases.push(b.bias(format!("denoiser.{k}.b"), out, Denoiser));
            inn = out;
        }
        Layout {
            seq_embed,
            struct_norm_g,
            struct_norm_b,
            struct_proj,
            struct_mask_embed,
            pos_embed,
            layers,
            final_g,
            final_b,
            proj_w,
            proj_b,
            denoiser: DenoiserSlots { weights, biases },
            total: b.offset,
            tensors: b.tensors,
        }
    }
}

/// All trainable parameters in one flat vector with a named layout.
/// Gradients use the same type.
#[derive(Clone, Debug)]
pub struct ModelParams<F> {
    config: ModelConfig,
    layout: Layout,
    data: Vec<F>,
}

impl<F: Real> ModelParams<F> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let data = vec![F::zero(); layout.total];
        Ok(Self { config: config.clone(), layout, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self { config: self.config.clone(), layout: self.layout.clone(), data: vec![F::zero(); self.data.len()] }
    }

    pub fn from_flat(config: &ModelConfig, data: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if data.len() != layout.total {
            return Err(Error::arg(format!(
                "flat parameter length {} does not match layout size {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Self { config: config.clone(), layout, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn flat(&self) -> &[F] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, slot: Slot) -> &[F] {
        &self.data[slot.range()]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [F] {
        &mut self.data[slot.range()]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| G::lit(v.as_f64())).collect(),
        }
    }
}

/// Scaled-uniform weights (std `1/sqrt(fan_in)`), zero biases, unit gains.
pub fn init_params<F: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    let mut params = ModelParams::<F>::zeros(config)?;
    let tensors = params.layout.tensors.clone();
    for (k, t) in tensors.iter().enumerate() {
        let mut rng = substream(seed, Stream::Init, k as u64, 0);
        let dst = params.get_mut(t.slot);
        match t.init {
            InitKind::Zeros => dst.fill(F::zero()),
            InitKind::Ones => dst.fill(F::one()),
            InitKind::Uniform { fan_in } => {
                let a = (3.0 / fan_in as f64).sqrt();
                for v in dst.iter_mut() {
                    *v = F::lit(rng.gen_range(-a..a));
                }
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn zero_layer_config_rejected() {
        let cfg = ModelConfig { n_layers: 0, ..Default::default() };
        assert!(init_params::<f32>(&cfg, 1).is_err());
        let cfg = ModelConfig { d_hidden: 63, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn layout_is_contiguous() {
        let layout = Layout::new(&ModelConfig::default());
        let mut off = 0;
        for t in &layout.tensors {
            assert_eq!(t.slot.offset, off, "{}", t.name);
            off += t.slot.len();
        }
        assert_eq!(off, layout.total);
        for class in ParamClass::ALL {
            assert!(layout.tensors.iter().any(|t| t.class == class), "{class:?}");
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = init_params::<f32>(&cfg, 7).unwrap();
        let b = init_params::<f32>(&cfg, 7).unwrap();
        let c = init_params::<f32>(&cfg, 8).unwrap();
        assert_eq!(a.flat(), b.flat());
        assert_ne!(a.flat(), c.flat());
    }

    #[test]
    fn init_statistics_follow_fan_in() {
        let cfg = ModelConfig::default();
        let p = init_params::<f64>(&cfg, 3).unwrap();
        for t in &p.layout().tensors {
            let vals = p.get(t.slot);
            match t.init {
                InitKind::Zeros => assert!(vals.iter().all(|&v| v == 0.0)),
                InitKind::Ones => assert!(vals.iter().all(|&v| v == 1.0)),
                InitKind::Uniform { fan_in } => {
                    if vals.len() < 200 {
                        continue;
                    }
                    let n = vals.len() as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                    let want = 1.0 / (fan_in as f64).sqrt();
                    assert!((std / want - 1.0).abs() < 0.1, "{}: std {std} want {want}", t.name);
                }
            }
        }
    }

    #[test]
    fn flat_round_trip_is_exact() {
        let cfg = ModelConfig::default();
        let p = init_params::<f32>(&cfg, 1).unwrap();
        let q = ModelParams::from_flat(&cfg, p.flat().to_vec()).unwrap();
        assert_eq!(p.flat(), q.flat());
        assert!(ModelParams::<f32>::from_flat(&cfg, vec![0.0; 3]).is_err());
    }
}
