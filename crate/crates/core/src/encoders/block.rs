use crate::error::Result;
use crate::params::{Bound, ParamId};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x @ w + b` over the last axis.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Multi-head self-attention on `[B, N, D]` tokens.
///
/// `bias` is added to the `[B, H, N, N]` attention logits before the softmax;
/// a `[N, N]` bias is broadcast across batch and heads.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    ids: &BlockIds,
    h: Var,
    heads: usize,
    bias: Option<Var>,
) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    // Softmax is shift invariant along keys, so a key bias would be inert.
    let qv_b = bound.var(ids.qkv_b);
    let q_b = tape.slice(qv_b, 0, 0, d)?;
    let v_b = tape.slice(qv_b, 0, d, d)?;
    let k_b = tape.constant(crate::tensor::Tensor::zeros(&[d]));
    let qkv_b = tape.concat(&[q_b, k_b, v_b], 0)?;
    let qkv = linear(tape, h, bound.var(ids.qkv_w), qkv_b)?;
    let qkv = tape.reshape(qkv, &[b, n, 3, heads, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let s = tape.slice(qkv, 0, i, 1)?;
        *part = tape.reshape(s, &[b, heads, n, dh])?;
    }
    let [q, k, v] = parts;
    let q = tape.scale(q, 1.0 / (dh as f64).sqrt())?;
    let mut scores = tape.matmul_nt(q, k)?;
    if let Some(bias) = bias {
        scores = tape.add(scores, bias)?;
    }
    let attn = tape.softmax(scores)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, n, d])?;
    linear(tape, ctx, bound.var(ids.proj_w), bound.var(ids.proj_b))
}

pub fn mlp<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, ids: &BlockIds, h: Var) -> Result<Var> {
    let z = linear(tape, h, bound.var(ids.fc1_w), bound.var(ids.fc1_b))?;
    let z = tape.gelu(z)?;
    linear(tape, z, bound.var(ids.fc2_w), bound.var(ids.fc2_b))
}

pub(crate) fn pre_norm<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, g: ParamId, b: ParamId, x: Var) -> Result<Var> {
    tape.layer_norm(x, bound.var(g), bound.var(b), LN_EPS)
}
