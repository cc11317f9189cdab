//! Multi-scale deformable cross-attention.

use std::f64::consts::TAU;

use numcore::{Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamStore};

/// Each query samples `points` locations on every pyramid level around its
/// reference point, mixes them with softmax weights and projects the result.
///
/// Offsets are in cells of the level being sampled.
#[derive(Clone, Debug)]
pub struct DeformableAttention {
    pub levels: usize,
    pub points: usize,
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
}

impl DeformableAttention {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        levels: usize,
        points: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let offsets = Linear::with_std(store, &format!("{name}.offsets"), dim, levels * points * 2, 0.01, rng);
        // start the sampling points on a unit ring around the reference
        let ring = store.get_mut(offsets.bias).data_mut();
        for l in 0..levels {
            for k in 0..points {
                let angle = TAU * k as f64 / points as f64;
                let o = (l * points + k) * 2;
                ring[o] = S::lit(angle.cos());
                ring[o + 1] = S::lit(angle.sin());
            }
        }
        Self {
            levels,
            points,
            offsets,
            weights: Linear::with_std(store, &format!("{name}.weights"), dim, levels * points, 0.01, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
        }
    }

    /// `queries: [B, L, D]`, `refs: [L, 2]` normalised `(x, y)` in `[0, 1]`,
    /// `feats`: one `[B, H, W, D]` map per level. Returns `[B, L, D]`.
    pub fn forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        queries: Var,
        refs: Var,
        feats: &[Var],
    ) -> Result<Var> {
        if feats.len() != self.levels {
            return Err(Error::Invalid(format!(
                "deformable attention expects {} levels, got {}",
                self.levels,
                feats.len()
            )));
        }
        let qs = tape.shape(queries).to_vec();
        let (b, l, d) = (qs[0], qs[1], qs[2]);
        let (nl, kp) = (self.levels, self.points);
        let off = self.offsets.forward(tape, p, queries)?;
        let off = tape.reshape(off, &[b, l, nl, kp, 2])?;
        let logits = self.weights.forward(tape, p, queries)?;
        let attn = tape.softmax(logits)?;
        let attn = tape.reshape(attn, &[b, l, 1, nl * kp])?;
        let refs = tape.reshape(refs, &[1, l, 1, 2])?;
        let mut samples = Vec::with_capacity(nl);
        for (li, &map) in feats.iter().enumerate() {
            let ms = tape.shape(map).to_vec();
            let (h, w) = (ms[1], ms[2]);
            let scale = tape.constant(Tensor::from_vec(vec![S::lit(w as f64), S::lit(h as f64)]));
            let centre = tape.mul(refs, scale)?;
            let centre = tape.add_scalar(centre, S::lit(-0.5));
            let o = tape.slice(off, 2, li, 1)?;
            let o = tape.reshape(o, &[b, l, kp, 2])?;
            let loc = tape.add(centre, o)?;
            let loc = tape.reshape(loc, &[b, l * kp, 2])?;
            let s = tape.bilinear_sample(map, loc)?;
            samples.push(tape.reshape(s, &[b, l, kp, d])?);
        }
        let stacked = tape.concat(&samples, 2)?;
        let mixed = tape.matmul(attn, stacked)?;
        let mixed = tape.reshape(mixed, &[b, l, d])?;
        self.value.forward(tape, p, mixed)
    }
}
