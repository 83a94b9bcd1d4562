//! ViT-style image encoder, causal text encoder and projection heads.

mod block;
mod text;
mod vision;

pub use block::{attention, linear, mlp, BlockIds};
pub(crate) use block::pre_norm as block_pre_norm;
pub use text::TextBatch;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterState};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Bound, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Architecture hyperparameters for both encoders and the shared embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_vocab: usize,
    pub text_len: usize,
    pub text_depth: usize,
    pub text_dim: usize,
    pub text_heads: usize,
    pub embed_dim: usize,
    /// Number of full-resolution blocks before grid tokens are clustered.
    pub cluster_after: Option<usize>,
    pub keep_ratio: f64,
    /// Image-level and region-level embeddings use the same visual head.
    pub share_visual_head: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            depth: 6,
            dim: 128,
            heads: 4,
            mlp_ratio: 2,
            text_vocab: 64,
            text_len: 16,
            text_depth: 1,
            text_dim: 64,
            text_heads: 4,
            embed_dim: 64,
            cluster_after: Some(2),
            keep_ratio: 0.25,
            share_visual_head: true,
        }
    }
}

impl EncoderConfig {
    /// Small configuration for finite-difference checks: a 2x2 token grid.
    pub fn tiny() -> Self {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            text_vocab: 64,
            text_len: 6,
            text_depth: 1,
            text_dim: 8,
            text_heads: 2,
            embed_dim: 6,
            cluster_after: None,
            keep_ratio: 0.25,
            share_visual_head: true,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Representatives kept when clustering: `ceil(keep_ratio * n)`.
    pub fn num_representatives(&self) -> usize {
        crate::granularity::representative_count(self.num_patches(), self.keep_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.text_heads == 0 || self.text_dim % self.text_heads != 0 {
            return fail(format!(
                "text_dim {} not divisible by text_heads {}",
                self.text_dim, self.text_heads
            ));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return fail(format!("keep_ratio {} outside (0, 1]", self.keep_ratio));
        }
        if let Some(c) = self.cluster_after {
            if c >= self.depth {
                return fail(format!("cluster_after {c} must be < depth {}", self.depth));
            }
        }
        if self.depth == 0 || self.text_depth == 0 || self.channels == 0 || self.embed_dim == 0 {
            return fail("depth, text_depth, channels and embed_dim must be positive".into());
        }
        if self.text_len == 0 || self.text_vocab < 2 || self.mlp_ratio == 0 {
            return fail("text_len, text_vocab and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// Class token and grid tokens of one image batch.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    /// `[b, d]`
    pub cls: Var,
    /// `[b, n, d]`
    pub grid: Var,
    pub grid_side: usize,
}

/// Rows of embeddings on the tape, with their normalization status.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingSet {
    pub vectors: Var,
    pub normalized: bool,
}

/// Which linear mapping an embedding passes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Image,
    Region,
    Text,
}

#[derive(Debug, Clone)]
pub(crate) struct VisionIds {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct TextIds {
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadIds {
    pub visual: ParamId,
    pub region: ParamId,
    pub text: ParamId,
    pub logit_scale: ParamId,
}

/// Image encoder, text encoder, projection heads and optional adapters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: EncoderConfig,
    pub params: ParamStore<T>,
    pub(crate) vision: VisionIds,
    pub(crate) text: TextIds,
    pub(crate) heads: HeadIds,
    pub(crate) adapters: Option<AdapterState>,
}

/// CLIP's initial temperature of 0.07, stored as `ln(1 / 0.07)`.
pub const INITIAL_LOGIT_SCALE: f64 = 2.659_260_036_932_778_4;

fn add_block<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
    hidden: usize,
    depth: usize,
    group: ParamGroup,
) -> BlockIds {
    let in_std = (dim as f64).powf(-0.5);
    let out_std = in_std / (2.0 * depth as f64).sqrt();
    let hid_std = (hidden as f64).powf(-0.5) / (2.0 * depth as f64).sqrt();
    let mut p = |name: &str, t: Tensor<T>, decay: bool| store.insert(format!("{prefix}.{name}"), t, group, decay);
    BlockIds {
        ln1_g: p("ln1.g", Tensor::full(&[dim], T::one()), false),
        ln1_b: p("ln1.b", Tensor::zeros(&[dim]), false),
        qkv_w: p("attn.qkv.w", normal_tensor(rng, &[dim, 3 * dim], in_std), true),
        qkv_b: p("attn.qv.b", Tensor::zeros(&[2 * dim]), false),
        proj_w: p("attn.proj.w", normal_tensor(rng, &[dim, dim], out_std), true),
        proj_b: p("attn.proj.b", Tensor::zeros(&[dim]), false),
        ln2_g: p("ln2.g", Tensor::full(&[dim], T::one()), false),
        ln2_b: p("ln2.b", Tensor::zeros(&[dim]), false),
        fc1_w: p("mlp.fc1.w", normal_tensor(rng, &[dim, hidden], in_std), true),
        fc1_b: p("mlp.fc1.b", Tensor::zeros(&[hidden]), false),
        fc2_w: p("mlp.fc2.w", normal_tensor(rng, &[hidden, dim], hid_std), true),
        fc2_b: p("mlp.fc2.b", Tensor::zeros(&[dim]), false),
    }
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model; deterministic in `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let n = config.num_patches();
        let patch_dim = config.channels * config.patch_size * config.patch_size;
        let vg = ParamGroup::VisionBackbone;
        let tg = ParamGroup::TextBackbone;

        let patch_w = store.insert("vision.patch.w", normal_tensor(&mut rng, &[patch_dim, d], (patch_dim as f64).powf(-0.5)), vg, true);
        let patch_b = store.insert("vision.patch.b", Tensor::zeros(&[d]), vg, false);
        let cls = store.insert("vision.cls", normal_tensor(&mut rng, &[d], 0.02), vg, false);
        let pos = store.insert("vision.pos", normal_tensor(&mut rng, &[n, d], 0.02), vg, false);
        let blocks = (0..config.depth)
            .map(|i| add_block(&mut store, &mut rng, &format!("vision.blocks.{i}"), d, d * config.mlp_ratio, config.depth, vg))
            .collect();
        let ln_g = store.insert("vision.ln_post.g", Tensor::full(&[d], T::one()), vg, false);
        let ln_b = store.insert("vision.ln_post.b", Tensor::zeros(&[d]), vg, false);
        let vision = VisionIds {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            ln_g,
            ln_b,
        };

        let td = config.text_dim;
        let tok = store.insert("text.tok", normal_tensor(&mut rng, &[config.text_vocab, td], 0.02), tg, false);
        let tpos = store.insert("text.pos", normal_tensor(&mut rng, &[config.text_len, td], 0.01), tg, false);
        let tblocks = (0..config.text_depth)
            .map(|i| add_block(&mut store, &mut rng, &format!("text.blocks.{i}"), td, td * config.mlp_ratio, config.text_depth, tg))
            .collect();
        let tln_g = store.insert("text.ln_final.g", Tensor::full(&[td], T::one()), tg, false);
        let tln_b = store.insert("text.ln_final.b", Tensor::zeros(&[td]), tg, false);
        let text = TextIds {
            tok,
            pos: tpos,
            blocks: tblocks,
            ln_g: tln_g,
            ln_b: tln_b,
        };

        let e = config.embed_dim;
        let hg = ParamGroup::Head;
        let visual = store.insert("head.visual", normal_tensor(&mut rng, &[d, e], (d as f64).powf(-0.5)), hg, true);
        let region = if config.share_visual_head {
            visual
        } else {
            store.insert("head.region", normal_tensor(&mut rng, &[d, e], (d as f64).powf(-0.5)), hg, true)
        };
        let text_head = store.insert("head.text", normal_tensor(&mut rng, &[td, e], (td as f64).powf(-0.5)), hg, true);
        let logit_scale = store.insert("head.logit_scale", Tensor::scalar(T::from_f64(INITIAL_LOGIT_SCALE)), hg, false);
        let heads = HeadIds {
            visual,
            region,
            text: text_head,
            logit_scale,
        };

        Ok(Model {
            config,
            params: store,
            vision,
            text,
            heads,
            adapters: None,
        })
    }

    /// Same architecture and weights in another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            vision: self.vision.clone(),
            text: self.text.clone(),
            heads: self.heads.clone(),
            adapters: self.adapters.clone(),
        }
    }

    pub fn adapters(&self) -> Option<&AdapterState> {
        self.adapters.as_ref()
    }

    pub fn vision_blocks(&self) -> &[BlockIds] {
        &self.vision.blocks
    }

    /// Inserts Convpass adapters with zero-initialized up-projections.
    pub fn attach_adapters(&mut self, config: AdapterConfig, seed: u64) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::State("adapters already attached".into()));
        }
        let state = AdapterState::init(&mut self.params, &self.config, config, seed)?;
        self.adapters = Some(state);
        Ok(())
    }

    pub fn logit_scale_id(&self) -> ParamId {
        self.heads.logit_scale
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.heads.visual, self.heads.text, self.heads.logit_scale];
        if self.heads.region != self.heads.visual {
            ids.push(self.heads.region);
        }
        ids
    }

    /// Linear mapping to the shared embedding space followed by l2-normalization.
    pub fn project_embed(&self, tape: &mut Tape<T>, bound: &Bound, raw: Var, head: Head) -> Result<EmbeddingSet> {
        let w = match head {
            Head::Image => self.heads.visual,
            Head::Region => self.heads.region,
            Head::Text => self.heads.text,
        };
        let w = bound.var(w);
        let in_dim = tape.shape(w)[0];
        if tape.shape(raw).last() != Some(&in_dim) {
            return Err(Error::dim(
                "project_embed",
                format!("input {:?} for head expecting width {in_dim}", tape.shape(raw)),
            ));
        }
        let mapped = tape.matmul(raw, w)?;
        let vectors = tape.l2_normalize(mapped)?;
        Ok(EmbeddingSet {
            vectors,
            normalized: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_shapes() {
        let c = EncoderConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 64);
        assert_eq!(c.num_representatives(), 16);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = EncoderConfig { patch_size: 5, ..Default::default() };
        assert!(c.validate().is_err());
        c = EncoderConfig { heads: 3, ..Default::default() };
        assert!(c.validate().is_err());
        c = EncoderConfig { cluster_after: Some(6), ..Default::default() };
        assert!(c.validate().is_err());
        c = EncoderConfig { keep_ratio: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn identity_head_keeps_unit_vector() {
        let config = EncoderConfig { embed_dim: 128, ..EncoderConfig::default() };
        let mut model = Model::<f64>::new(config, 1).unwrap();
        model.params.set(model.heads.visual, Tensor::eye(128)).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, |_, _| false);
        let mut v = vec![0.0; 128];
        v[3] = 0.6;
        v[7] = 0.8;
        let x = tape.constant(Tensor::from_f64(&[1, 128], &v).unwrap());
        let e = model.project_embed(&mut tape, &bound, x, Head::Image).unwrap();
        assert_eq!(tape.value(e.vectors).to_f64_vec(), v);
    }

    #[test]
    fn projection_is_scale_invariant_and_unit_norm() {
        let model = Model::<f64>::new(EncoderConfig::default(), 3).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, |_, _| false);
        let raw: Tensor<f64> = normal_tensor(&mut ChaCha8Rng::seed_from_u64(9), &[5, 128], 1.0);
        let scaled = Tensor::new(raw.shape(), raw.data().iter().map(|v| v * 3.0).collect()).unwrap();
        let a = tape.constant(raw);
        let b = tape.constant(scaled);
        let ea = model.project_embed(&mut tape, &bound, a, Head::Region).unwrap();
        let eb = model.project_embed(&mut tape, &bound, b, Head::Region).unwrap();
        for (ra, rb) in tape.value(ea.vectors).rows().zip(tape.value(eb.vectors).rows()) {
            let norm: f64 = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_input_projection_is_numeric_error() {
        let model = Model::<f64>::new(EncoderConfig::tiny(), 3).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, |_, _| false);
        let x = tape.constant(Tensor::zeros(&[2, 8]));
        assert!(matches!(
            model.project_embed(&mut tape, &bound, x, Head::Image),
            Err(Error::Numeric { .. })
        ));
    }
}
