//! Convpass adapters running in parallel with attention and MLP sublayers,
//! and the parameter partition for frozen-backbone adaptation.
//!
//! Per block, with `s` the adapter scale:
//!
//! ```text
//! X'  = X  + MHSA(X)  + s * PET_mhsa(X)
//! X'' = X' + MLP(X')  + s * PET_mlp(X')
//! ```
//!
//! Both sublayers are pre-norm, and each adapter reads the same normalized
//! input as the sublayer it parallels. The grid path of an adapter is
//! `1x1 conv -> GELU -> 3x3 conv -> GELU -> 1x1 conv` over the token grid
//! laid out as `[B, D, side, side]`. By default the class token takes the
//! same two 1x1 projections and GELUs with the 3x3 stage replaced by identity,
//! so it never mixes spatially through an adapter; [`ClsRoute::CenterTap`]
//! instead treats it as a 1x1 image, where the padded 3x3 kernel reduces to
//! its centre tap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{attention, mlp, BlockIds, EncoderConfig, Model, TokenSequence};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Bound, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// How the class token passes through the middle 3x3 stage of an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsRoute {
    #[default]
    Identity,
    CenterTap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Contribution scale `s`.
    pub s: f64,
    /// Hidden channels; `None` means `max(8, dim / 4)`.
    pub bottleneck: Option<usize>,
    /// Vision block indices that receive adapters; `None` means all.
    pub insertion: Option<Vec<usize>>,
    pub cls_route: ClsRoute,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            s: 0.1,
            bottleneck: None,
            insertion: None,
            cls_route: ClsRoute::Identity,
        }
    }
}

impl AdapterConfig {
    pub fn bottleneck_for(&self, dim: usize) -> usize {
        self.bottleneck.unwrap_or_else(|| (dim / 4).max(8))
    }
}

/// Weights of one Convpass module.
#[derive(Debug, Clone)]
pub struct ConvpassIds {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub mid_w: ParamId,
    pub mid_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

/// The pair of adapters attached to one block.
#[derive(Debug, Clone)]
pub struct BlockAdapters {
    pub attn: ConvpassIds,
    pub mlp: ConvpassIds,
}

#[derive(Debug, Clone)]
pub struct AdapterState {
    pub config: AdapterConfig,
    pub bottleneck: usize,
    pub blocks: Vec<Option<BlockAdapters>>,
}

impl AdapterState {
    pub(crate) fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        enc: &EncoderConfig,
        config: AdapterConfig,
        seed: u64,
    ) -> Result<Self> {
        if config.s < 0.0 || !config.s.is_finite() {
            return Err(Error::Config(format!("adapter scale {} must be >= 0", config.s)));
        }
        let d = enc.dim;
        let h = config.bottleneck_for(d);
        if h == 0 {
            return Err(Error::Config("adapter bottleneck must be >= 1".into()));
        }
        if let Some(ins) = &config.insertion {
            if let Some(bad) = ins.iter().find(|&&i| i >= enc.depth) {
                return Err(Error::Config(format!("adapter insertion block {bad} >= depth {}", enc.depth)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = ParamGroup::Adapter;
        let mut make = |store: &mut ParamStore<T>, prefix: String| ConvpassIds {
            down_w: store.insert(format!("{prefix}.down.w"), normal_tensor(&mut rng, &[h, d, 1, 1], (d as f64).powf(-0.5)), g, true),
            down_b: store.insert(format!("{prefix}.down.b"), Tensor::zeros(&[h]), g, false),
            mid_w: store.insert(format!("{prefix}.mid.w"), normal_tensor(&mut rng, &[h, h, 3, 3], (9.0 * h as f64).powf(-0.5)), g, true),
            mid_b: store.insert(format!("{prefix}.mid.b"), Tensor::zeros(&[h]), g, false),
            up_w: store.insert(format!("{prefix}.up.w"), Tensor::zeros(&[d, h, 1, 1]), g, true),
            up_b: store.insert(format!("{prefix}.up.b"), Tensor::zeros(&[d]), g, false),
        };
        let blocks = (0..enc.depth)
            .map(|i| {
                let wanted = config.insertion.as_ref().is_none_or(|ins| ins.contains(&i));
                wanted.then(|| BlockAdapters {
                    attn: make(store, format!("adapter.{i}.attn")),
                    mlp: make(store, format!("adapter.{i}.mlp")),
                })
            })
            .collect();
        Ok(AdapterState {
            config,
            bottleneck: h,
            blocks,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flatten()
            .flat_map(|b| [&b.attn, &b.mlp])
            .flat_map(|c| [c.down_w, c.down_b, c.mid_w, c.mid_b, c.up_w, c.up_b])
            .collect()
    }
}

/// Adapter parameter count per adapted block, in closed form.
pub fn adapter_params_per_block(dim: usize, bottleneck: usize) -> usize {
    let (d, h) = (dim, bottleneck);
    2 * (d * h + 9 * h * h + h * d) + 2 * (h + h + d)
}

/// Applies one Convpass module to a token sequence.
pub fn convpass_apply<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    ids: &ConvpassIds,
    tokens: TokenSequence,
    cls_route: ClsRoute,
) -> Result<TokenSequence> {
    let gshape = tape.shape(tokens.grid).to_vec();
    let (b, n, d) = (gshape[0], gshape[1], gshape[2]);
    let side = tokens.grid_side;
    if side * side != n {
        return Err(Error::contract(format!("convpass needs a square grid, got {n} tokens")));
    }
    let x = tape.permute(tokens.grid, &[0, 2, 1])?;
    let x = tape.reshape(x, &[b, d, side, side])?;
    let z = tape.conv2d(x, bound.var(ids.down_w), bound.var(ids.down_b))?;
    let z = tape.gelu(z)?;
    let z = tape.conv2d(z, bound.var(ids.mid_w), bound.var(ids.mid_b))?;
    let z = tape.gelu(z)?;
    let z = tape.conv2d(z, bound.var(ids.up_w), bound.var(ids.up_b))?;
    let z = tape.reshape(z, &[b, d, n])?;
    let grid = tape.permute(z, &[0, 2, 1])?;

    let hidden = tape.shape(bound.var(ids.down_w))[0];
    let down = tape.reshape(bound.var(ids.down_w), &[hidden, d])?;
    let up = tape.reshape(bound.var(ids.up_w), &[d, hidden])?;
    let c = tape.matmul_nt(tokens.cls, down)?;
    let c = tape.add(c, bound.var(ids.down_b))?;
    let mut c = tape.gelu(c)?;
    if cls_route == ClsRoute::CenterTap {
        let taps = tape.reshape(bound.var(ids.mid_w), &[hidden, hidden, 9])?;
        let centre = tape.slice(taps, 2, 4, 1)?;
        let centre = tape.reshape(centre, &[hidden, hidden])?;
        c = tape.matmul_nt(c, centre)?;
        c = tape.add(c, bound.var(ids.mid_b))?;
    }
    let c = tape.gelu(c)?;
    let c = tape.matmul_nt(c, up)?;
    let cls = tape.add(c, bound.var(ids.up_b))?;
    Ok(TokenSequence { cls, grid, grid_side: side })
}

fn split_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var, side: usize) -> Result<TokenSequence> {
    let s = tape.shape(x).to_vec();
    let (b, n1, d) = (s[0], s[1], s[2]);
    let cls = tape.slice(x, 1, 0, 1)?;
    let cls = tape.reshape(cls, &[b, d])?;
    let grid = tape.slice(x, 1, 1, n1 - 1)?;
    Ok(TokenSequence { cls, grid, grid_side: side })
}

fn join_tokens<T: Scalar>(tape: &mut Tape<T>, t: TokenSequence) -> Result<Var> {
    let s = tape.shape(t.cls).to_vec();
    let cls = tape.reshape(t.cls, &[s[0], 1, s[1]])?;
    tape.concat(&[cls, t.grid], 1)
}

/// Adapters of one block together with the settings they run under.
#[derive(Debug, Clone, Copy)]
pub struct ActiveAdapters<'a> {
    pub ids: &'a BlockAdapters,
    pub s: f64,
    pub cls_route: ClsRoute,
}

/// One transformer block over `[B, 1 + n, D]` tokens (class token first),
/// with optional adapters in parallel to both sublayers.
#[allow(clippy::too_many_arguments)]
pub fn adapted_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    block: &BlockIds,
    x: Var,
    heads: usize,
    attn_bias: Option<Var>,
    adapters: Option<ActiveAdapters<'_>>,
    grid_side: usize,
) -> Result<Var> {
    let h = crate::encoders::block_pre_norm(tape, bound, block.ln1_g, block.ln1_b, x)?;
    let a = attention(tape, bound, block, h, heads, attn_bias)?;
    let mut x1 = tape.add(x, a)?;
    if let Some(ad) = adapters {
        let p = split_tokens(tape, h, grid_side)?;
        let p = convpass_apply(tape, bound, &ad.ids.attn, p, ad.cls_route)?;
        let p = join_tokens(tape, p)?;
        let p = tape.scale(p, ad.s)?;
        x1 = tape.add(x1, p)?;
    }
    let h2 = crate::encoders::block_pre_norm(tape, bound, block.ln2_g, block.ln2_b, x1)?;
    let m = mlp(tape, bound, block, h2)?;
    let mut x2 = tape.add(x1, m)?;
    if let Some(ad) = adapters {
        let p = split_tokens(tape, h2, grid_side)?;
        let p = convpass_apply(tape, bound, &ad.ids.mlp, p, ad.cls_route)?;
        let p = join_tokens(tape, p)?;
        let p = tape.scale(p, ad.s)?;
        x2 = tape.add(x2, p)?;
    }
    Ok(x2)
}

/// Training regime that decides which parameters are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pretrain,
    Adapt,
}

/// Split of a model's parameters into optimized and frozen sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub trainable: Vec<ParamId>,
    pub frozen: Vec<ParamId>,
}

impl Partition {
    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.binary_search(&id).is_ok()
    }
}

/// Pretrain optimizes backbone and heads; adapt optimizes adapters and heads only.
pub fn partition_parameters<T: Scalar>(model: &Model<T>, mode: Mode) -> Partition {
    let mut trainable = Vec::new();
    let mut frozen = Vec::new();
    for (id, p) in model.params.iter() {
        let train = match mode {
            Mode::Pretrain => p.group != ParamGroup::Adapter,
            Mode::Adapt => matches!(p.group, ParamGroup::Adapter | ParamGroup::Head),
        };
        if train {
            trainable.push(id);
        } else {
            frozen.push(id);
        }
    }
    Partition { trainable, frozen }
}
