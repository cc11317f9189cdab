//! Image-conditioned masked token transformer.
//!
//! A patch encoder turns heatmap images into a feature pyramid. Pose token
//! slots (code indices or a shared mask symbol) are embedded, refined by
//! self-attention and deformable cross-attention into the pyramid, and
//! mapped to per-slot code logits. A pooled head regresses shape and camera
//! translation.

mod encoder;
mod msda;

use numcore::{Real, Tape, Tensor, Var};
use rand::Rng;

pub use msda::DeformableAttention;

use crate::body::NUM_BETAS;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, SelfAttention};
use crate::params::{normal, Bound, ParamId, ParamStore};
use encoder::ImageEncoder;

/// Outputs of the shape/camera head: ten shape coefficients and a translation.
pub const SHAPE_CAMERA_OUTPUTS: usize = NUM_BETAS + 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_points: usize,
    pub levels: Vec<usize>,
    pub ffn_dim: usize,
    pub head_hidden: usize,
    pub n_codes: usize,
    pub n_tokens: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &Config, channels: usize) -> Self {
        Self {
            image_size: cfg.image_size,
            channels,
            patch_size: cfg.patch_size,
            model_dim: cfg.model_dim,
            n_heads: cfg.n_heads,
            n_layers: cfg.n_layers,
            n_points: cfg.n_points,
            levels: cfg.levels.clone(),
            ffn_dim: cfg.ffn_dim,
            head_hidden: cfg.head_hidden,
            n_codes: cfg.n_codes,
            n_tokens: cfg.n_tokens,
        }
    }

    /// Side of the base feature grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Slot value standing for a masked token.
    pub fn mask_token(&self) -> usize {
        self.n_codes
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!("image size {} not divisible by patch {}", self.image_size, self.patch_size));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return fail(format!("model_dim {} not divisible by {} heads", self.model_dim, self.n_heads));
        }
        if self.levels.is_empty() || self.levels.contains(&0) || self.n_points == 0 {
            return fail("need at least one nonzero level and one point".into());
        }
        if self.channels == 0 || self.n_codes == 0 || self.n_tokens == 0 {
            return fail("channels, codes and tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: SelfAttention,
    cross_norm: LayerNorm,
    cross_attn: DeformableAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, x: Var, refs: Var, feats: &[Var]) -> Result<Var> {
        let h = self.self_norm.forward(tape, p, x)?;
        let h = self.self_attn.forward(tape, p, h)?;
        let x = tape.add(x, h)?;
        let h = self.cross_norm.forward(tape, p, x)?;
        let h = self.cross_attn.forward(tape, p, h, refs, feats)?;
        let x = tape.add(x, h)?;
        let h = self.ffn_norm.forward(tape, p, x)?;
        let h = self.ffn.forward(tape, p, h)?;
        Ok(tape.add(x, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct MaskedTransformer<S> {
    pub dims: ModelDims,
    pub params: ParamStore<S>,
    encoder: ImageEncoder,
    token_table: ParamId,
    token_pos: ParamId,
    ref_logits: ParamId,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    classifier: Linear,
    head_hidden: Linear,
    head_out: Linear,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl<S: Real> MaskedTransformer<S> {
    /// `prior_translation` seeds the camera head so that untrained models
    /// already place the body in front of the camera.
    pub fn new(dims: ModelDims, prior_translation: [f64; 3], rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        if prior_translation[2] <= 1.0 {
            return Err(Error::Invalid("prior depth must exceed 1".into()));
        }
        let (d, l) = (dims.model_dim, dims.n_tokens);
        let mut store = ParamStore::new();
        let encoder = ImageEncoder::new(&mut store, &dims, rng);
        let token_table = store.add("dec.tokens", normal(rng, &[dims.n_codes + 1, d], 0.2));
        let token_pos = store.add("dec.pos", normal(rng, &[l, d], 0.2));
        let side = (l as f64).sqrt().ceil() as usize;
        let refs = Tensor::from_fn(&[l, 2], |i| {
            let (slot, axis) = (i / 2, i % 2);
            let cell = if axis == 0 { slot % side } else { slot / side };
            S::lit(logit((cell as f64 + 0.5) / side as f64))
        });
        let ref_logits = store.add("dec.refs", refs);
        let layers = (0..dims.n_layers)
            .map(|i| {
                let name = format!("dec.layer{i}");
                DecoderLayer {
                    self_norm: LayerNorm::new(&mut store, &format!("{name}.self.norm"), d),
                    self_attn: SelfAttention::new(&mut store, &format!("{name}.self"), d, dims.n_heads, rng),
                    cross_norm: LayerNorm::new(&mut store, &format!("{name}.cross.norm"), d),
                    cross_attn: DeformableAttention::new(
                        &mut store,
                        &format!("{name}.cross"),
                        d,
                        dims.levels.len(),
                        dims.n_points,
                        rng,
                    ),
                    ffn_norm: LayerNorm::new(&mut store, &format!("{name}.ffn.norm"), d),
                    ffn: FeedForward::new(&mut store, &format!("{name}.ffn"), d, dims.ffn_dim, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut store, "dec.norm", d);
        let classifier = Linear::new(&mut store, "dec.logits", d, dims.n_codes, rng);
        let head_hidden = Linear::new(&mut store, "head.hidden", d, dims.head_hidden, rng);
        let head_out = Linear::with_std(&mut store, "head.out", dims.head_hidden, SHAPE_CAMERA_OUTPUTS, 0.01, rng);
        let bias = store.get_mut(head_out.bias).data_mut();
        bias[NUM_BETAS] = S::lit(prior_translation[0]);
        bias[NUM_BETAS + 1] = S::lit(prior_translation[1]);
        bias[NUM_BETAS + 2] = S::lit((prior_translation[2] - 1.0).exp_m1().ln());
        Ok(Self {
            dims,
            params: store,
            encoder,
            token_table,
            token_pos,
            ref_logits,
            layers,
            final_norm,
            classifier,
            head_hidden,
            head_out,
        })
    }

    /// Feature pyramid for `images: [B, H, W, C]`, finest level last.
    pub fn features(&self, tape: &mut Tape<S>, p: &Bound, images: Var) -> Result<Vec<Var>> {
        self.encoder.forward(tape, p, &self.dims, images)
    }

    /// Embeds row-major `[B, L]` slots (code index or mask) as `[B, L, D]`.
    pub fn embed(&self, tape: &mut Tape<S>, p: &Bound, slots: &[usize]) -> Result<Var> {
        let (l, d, k) = (self.dims.n_tokens, self.dims.model_dim, self.dims.n_codes);
        if slots.len() % l != 0 {
            return Err(Error::Invalid(format!("{} slots is not a multiple of {l}", slots.len())));
        }
        if let Some(&bad) = slots.iter().find(|&&s| s > k) {
            return Err(Error::Invalid(format!("slot value {bad} exceeds mask symbol {k}")));
        }
        let rows = tape.index_select(p[self.token_table], 0, slots)?;
        let rows = tape.reshape(rows, &[slots.len() / l, l, d])?;
        Ok(tape.add(rows, p[self.token_pos])?)
    }

    /// Learned reference points `[L, 2]` in `[0, 1]`.
    pub fn reference_points(&self, tape: &mut Tape<S>, p: &Bound) -> Var {
        tape.sigmoid(p[self.ref_logits])
    }

    /// Per-slot code logits `[B, L, K]`.
    pub fn logits(&self, tape: &mut Tape<S>, p: &Bound, slots: &[usize], feats: &[Var]) -> Result<Var> {
        let mut x = self.embed(tape, p, slots)?;
        let refs = self.reference_points(tape, p);
        for layer in &self.layers {
            x = layer.forward(tape, p, x, refs, feats)?;
        }
        let x = self.final_norm.forward(tape, p, x)?;
        self.classifier.forward(tape, p, x)
    }

    /// Shape `[B, 10]` and translation `[B, 3]` from the pooled coarsest map.
    /// Depth is `softplus(.) + 1`, so always positive.
    pub fn shape_camera(&self, tape: &mut Tape<S>, p: &Bound, feats: &[Var]) -> Result<(Var, Var)> {
        let coarsest = self.coarsest_level();
        let pooled = tape.mean_pool_spatial(feats[coarsest])?;
        let h = self.head_hidden.forward(tape, p, pooled)?;
        let h = tape.gelu(h);
        let out = self.head_out.forward(tape, p, h)?;
        let beta = tape.slice(out, 1, 0, NUM_BETAS)?;
        let txy = tape.slice(out, 1, NUM_BETAS, 2)?;
        let tz = tape.slice(out, 1, NUM_BETAS + 2, 1)?;
        let tz = tape.softplus(tz);
        let tz = tape.add_scalar(tz, S::one());
        let cam_t = tape.concat(&[txy, tz], 1)?;
        Ok((beta, cam_t))
    }

    fn coarsest_level(&self) -> usize {
        let levels = &self.dims.levels;
        (0..levels.len()).min_by_key(|&i| levels[i]).unwrap_or(0)
    }

    /// Feature pyramid values for a batch of images, for reuse across
    /// several decoding passes.
    pub fn feature_values(&self, images: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let feats = self.features(&mut tape, &p, x)?;
        Ok(feats.iter().map(|&f| tape.value(f).clone()).collect())
    }

    pub fn logits_values(&self, feats: &[Tensor<S>], slots: &[usize]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let f: Vec<Var> = feats.iter().map(|t| tape.constant(t.clone())).collect();
        let y = self.logits(&mut tape, &p, slots, &f)?;
        Ok(tape.value(y).clone())
    }

    pub fn shape_camera_values(&self, feats: &[Tensor<S>]) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let f: Vec<Var> = feats.iter().map(|t| tape.constant(t.clone())).collect();
        let (beta, cam) = self.shape_camera(&mut tape, &p, &f)?;
        Ok((tape.value(beta).clone(), tape.value(cam).clone()))
    }

    pub fn cast<T: Real>(&self) -> MaskedTransformer<T> {
        MaskedTransformer {
            dims: self.dims.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            token_table: self.token_table,
            token_pos: self.token_pos,
            ref_logits: self.ref_logits,
            layers: self.layers.clone(),
            final_norm: self.final_norm.clone(),
            classifier: self.classifier.clone(),
            head_hidden: self.head_hidden.clone(),
            head_out: self.head_out.clone(),
        }
    }

    /// Cross-attention module of decoder layer `i`.
    pub fn cross_attention(&self, i: usize) -> &DeformableAttention {
        &self.layers[i].cross_attn
    }
}
