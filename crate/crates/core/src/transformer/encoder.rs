//! Patch encoder producing a feature pyramid from heatmap images.

use numcore::{Real, Tape, Var};
use rand::Rng;

use super::ModelDims;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, SelfAttention};
use crate::params::{normal, Bound, ParamId, ParamStore};

/// Learned sub-pixel upsampling of the base grid by an integer factor.
#[derive(Clone, Debug)]
struct Upsample {
    factor: usize,
    proj: Option<Linear>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub(super) struct ImageEncoder {
    patch: Linear,
    pos: ParamId,
    attn_norm: LayerNorm,
    attn: SelfAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
    levels: Vec<Upsample>,
}

impl ImageEncoder {
    pub(super) fn new<S: Real>(store: &mut ParamStore<S>, dims: &ModelDims, rng: &mut impl Rng) -> Self {
        let d = dims.model_dim;
        let p = dims.patch_size;
        let grid = dims.grid();
        let levels = dims
            .levels
            .iter()
            .enumerate()
            .map(|(i, &f)| Upsample {
                factor: f,
                proj: (f > 1).then(|| Linear::new(store, &format!("enc.up{i}"), d, f * f * d, rng)),
                norm: LayerNorm::new(store, &format!("enc.up{i}.norm"), d),
            })
            .collect();
        Self {
            patch: Linear::new(store, "enc.patch", p * p * dims.channels, d, rng),
            pos: store.add("enc.pos", normal(rng, &[grid * grid, d], 0.1)),
            attn_norm: LayerNorm::new(store, "enc.attn.norm", d),
            attn: SelfAttention::new(store, "enc.attn", d, dims.n_heads, rng),
            ffn_norm: LayerNorm::new(store, "enc.ffn.norm", d),
            ffn: FeedForward::new(store, "enc.ffn", d, dims.ffn_dim, rng),
            levels,
        }
    }

    /// `image: [B, H, W, C]` → one `[B, g·f, g·f, D]` map per level factor `f`.
    pub(super) fn forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        prm: &Bound,
        dims: &ModelDims,
        image: Var,
    ) -> Result<Vec<Var>> {
        let shape = tape.shape(image).to_vec();
        let (size, c) = (dims.image_size, dims.channels);
        if shape.len() != 4 || shape[1] != size || shape[2] != size || shape[3] != c {
            return Err(Error::Invalid(format!(
                "expected images [B, {size}, {size}, {c}], got {shape:?}"
            )));
        }
        let (b, p, g, d) = (shape[0], dims.patch_size, dims.grid(), dims.model_dim);
        let x = tape.reshape(image, &[b, g, p, g, p, c])?;
        let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let x = tape.reshape(x, &[b, g * g, p * p * c])?;
        let x = self.patch.forward(tape, prm, x)?;
        let x = tape.add(x, prm[self.pos])?;
        let h = self.attn_norm.forward(tape, prm, x)?;
        let h = self.attn.forward(tape, prm, h)?;
        let x = tape.add(x, h)?;
        let h = self.ffn_norm.forward(tape, prm, x)?;
        let h = self.ffn.forward(tape, prm, h)?;
        let x = tape.add(x, h)?;
        let base = tape.reshape(x, &[b, g, g, d])?;
        self.levels
            .iter()
            .map(|lvl| {
                let f = lvl.factor;
                let up = match &lvl.proj {
                    None => base,
                    Some(proj) => {
                        let y = proj.forward(tape, prm, base)?;
                        let y = tape.reshape(y, &[b, g, g, f, f, d])?;
                        let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
                        tape.reshape(y, &[b, g * f, g * f, d])?
                    }
                };
                lvl.norm.forward(tape, prm, up)
            })
            .collect()
    }
}
