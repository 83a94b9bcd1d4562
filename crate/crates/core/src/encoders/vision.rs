use super::{Model, TokenSequence};
use crate::adapters::{adapted_block_forward, ActiveAdapters};
use crate::error::{Error, Result};
use crate::granularity::{cluster_with_prefix, size_bias, ClusterMap};
use crate::params::Bound;
use crate::tape::{permute_tensor, Tape};
use crate::tensor::{Scalar, Tensor};

/// `[B, C, H, W]` pixels to `[B, n, C * p * p]` row-major patches.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(Error::dim("patchify", format!("images {s:?} with patch {patch}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let six = images.clone().reshaped(&[b, c, gh, patch, gw, patch])?;
    permute_tensor(&six, &[0, 2, 4, 1, 3, 5]).reshaped(&[b, gh * gw, c * patch * patch])
}

impl<T: Scalar> Model<T> {
    /// Encodes `[B, C, H, W]` images into class and grid tokens.
    ///
    /// With `cluster_after = Some(c)`, the first `c` blocks run on all tokens,
    /// the grid is then clustered and the remaining blocks see only the
    /// representatives; they are unfolded back to full resolution at the end.
    pub fn encode_image(&self, tape: &mut Tape<T>, bound: &Bound, images: &Tensor<T>) -> Result<TokenSequence> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(Error::dim(
                "encode_image",
                format!(
                    "expected [b, {}, {}, {}], got {s:?}",
                    cfg.channels, cfg.image_size, cfg.image_size
                ),
            ));
        }
        if self.adapters.is_some() && cfg.cluster_after.is_some() {
            return Err(Error::contract("adapters need the full token grid; disable clustering"));
        }
        let b = s[0];
        let d = cfg.dim;
        let n = cfg.num_patches();
        let side = cfg.grid_side();
        let v = &self.vision;

        let patches = tape.constant(patchify(images, cfg.patch_size)?);
        let emb = tape.matmul(patches, bound.var(v.patch_w))?;
        let emb = tape.add(emb, bound.var(v.patch_b))?;
        let emb = tape.add(emb, bound.var(v.pos))?;
        let zeros = tape.constant(Tensor::zeros(&[b, 1, d]));
        let cls = tape.add(zeros, bound.var(v.cls))?;
        let mut x = tape.concat(&[cls, emb], 1)?;

        let mut maps = None;
        let mut bias = None;
        for (i, block) in v.blocks.iter().enumerate() {
            if cfg.cluster_after == Some(i) {
                let (reduced, m) = cluster_with_prefix(tape, x, cfg.keep_ratio, 1)?;
                x = reduced;
                bias = Some(tape.constant(size_bias(&m, cfg.heads)?));
                maps = Some(m);
            }
            let adapters = self
                .adapters
                .as_ref()
                .and_then(|a| {
                    a.blocks[i].as_ref().map(|ids| ActiveAdapters {
                        ids,
                        s: a.config.s,
                        cls_route: a.config.cls_route,
                    })
                });
            x = adapted_block_forward(tape, bound, block, x, cfg.heads, bias, adapters, side)?;
        }
        // Layer norm is per token, so it runs before unfolding.
        let x = tape.layer_norm(x, bound.var(v.ln_g), bound.var(v.ln_b), super::block::LN_EPS)?;
        let tokens = tape.shape(x)[1];
        let maps = maps.unwrap_or_else(|| vec![ClusterMap::identity(n); b]);
        let flat = tape.reshape(x, &[b * tokens, d])?;
        let cls_rows: Vec<usize> = (0..b).map(|bi| bi * tokens).collect();
        let cls = tape.gather(flat, 0, &cls_rows)?;
        let grid_rows: Vec<usize> = maps
            .iter()
            .enumerate()
            .flat_map(|(bi, m)| m.assignment.iter().map(move |&a| bi * tokens + 1 + a))
            .collect();
        let grid = tape.gather(flat, 0, &grid_rows)?;
        let grid = tape.reshape(grid, &[b, n, d])?;
        Ok(TokenSequence {
            cls,
            grid,
            grid_side: side,
        })
    }
}
