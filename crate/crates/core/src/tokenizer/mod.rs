//! Discrete pose tokenizer: 1D convolutional encoder, nearest-code
//! quantization with EMA updates, and a mirrored decoder.

mod codebook;
mod loss;

use numcore::{Real, Tape, Tensor, Var};
use rand::Rng;

pub use codebook::{dead_fraction, Codebook, EMA_EPS};
pub use loss::{vq_loss, VqComponents, VqInputs, VqLoss, VqWeights};

use crate::body::NUM_JOINTS;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Linear};
use crate::params::{normal, Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenizerDims {
    pub n_codes: usize,
    pub code_dim: usize,
    pub n_tokens: usize,
    pub width: usize,
}

impl TokenizerDims {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            n_codes: cfg.n_codes,
            code_dim: cfg.code_dim,
            n_tokens: cfg.n_tokens,
            width: cfg.tokenizer_width,
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    first: Conv1d,
    second: Conv1d,
}

impl ResBlock {
    fn new<S: Real>(store: &mut ParamStore<S>, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Conv1d::new(store, &format!("{name}.0"), width, width, 3, rng),
            second: Conv1d::new(store, &format!("{name}.1"), width, width, 3, rng),
        }
    }

    fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.gelu(x);
        let h = self.first.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.second.forward(tape, p, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Learned change of sequence length between 24 joints and `L` tokens.
#[derive(Clone, Debug)]
enum Resample {
    Identity,
    /// each position expands into `factor` positions
    Expand { factor: usize, proj: Linear },
    /// `factor` consecutive positions merge into one
    Merge { factor: usize, proj: Linear },
}

impl Resample {
    fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        from: usize,
        to: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        if from == to {
            Resample::Identity
        } else if to > from {
            let factor = to / from;
            Resample::Expand {
                factor,
                proj: Linear::new(store, name, width, factor * width, rng),
            }
        } else {
            let factor = from / to;
            Resample::Merge {
                factor,
                proj: Linear::new(store, name, factor * width, width, rng),
            }
        }
    }

    fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        match self {
            Resample::Identity => Ok(x),
            Resample::Expand { factor, proj } => {
                let y = proj.forward(tape, p, x)?;
                Ok(tape.reshape(y, &[b, n * factor, c])?)
            }
            Resample::Merge { factor, proj } => {
                let y = tape.reshape(x, &[b, n / factor, factor * c])?;
                proj.forward(tape, p, y)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    input: Conv1d,
    pre: ResBlock,
    resample: Resample,
    post: ResBlock,
    output: Linear,
}

#[derive(Clone, Debug)]
struct Decoder {
    input: Linear,
    pre: ResBlock,
    resample: Resample,
    post: ResBlock,
    output: Conv1d,
}

#[derive(Clone, Debug)]
pub struct PoseTokenizer<S> {
    pub dims: TokenizerDims,
    pub params: ParamStore<S>,
    pub codebook: Codebook<S>,
    encoder: Encoder,
    decoder: Decoder,
}

impl<S: Real> PoseTokenizer<S> {
    pub fn new(dims: TokenizerDims, rng: &mut impl Rng) -> Result<Self> {
        let (l, c) = (dims.n_tokens, dims.width);
        if l % NUM_JOINTS != 0 && NUM_JOINTS % l != 0 {
            return Err(Error::Invalid(format!("token count {l} must divide or be a multiple of 24")));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder {
            input: Conv1d::new(&mut store, "tok.enc.in", 3, c, 3, rng),
            pre: ResBlock::new(&mut store, "tok.enc.res0", c, rng),
            resample: Resample::new(&mut store, "tok.enc.resample", NUM_JOINTS, l, c, rng),
            post: ResBlock::new(&mut store, "tok.enc.res1", c, rng),
            output: Linear::new(&mut store, "tok.enc.out", c, dims.code_dim, rng),
        };
        let decoder = Decoder {
            input: Linear::new(&mut store, "tok.dec.in", dims.code_dim, c, rng),
            pre: ResBlock::new(&mut store, "tok.dec.res0", c, rng),
            resample: Resample::new(&mut store, "tok.dec.resample", l, NUM_JOINTS, c, rng),
            post: ResBlock::new(&mut store, "tok.dec.res1", c, rng),
            output: Conv1d::new(&mut store, "tok.dec.out", c, 3, 3, rng),
        };
        let codebook = Codebook::from_codes(normal(rng, &[dims.n_codes, dims.code_dim], 1.0));
        Ok(Self {
            dims,
            params: store,
            codebook,
            encoder,
            decoder,
        })
    }

    /// `theta: [B, 24, 3]` → latents `[B, L, D]`.
    pub fn encode(&self, tape: &mut Tape<S>, p: &Bound, theta: Var) -> Result<Var> {
        let e = &self.encoder;
        let h = e.input.forward(tape, p, theta)?;
        let h = e.pre.forward(tape, p, h)?;
        let h = e.resample.forward(tape, p, h)?;
        let h = e.post.forward(tape, p, h)?;
        let h = tape.gelu(h);
        e.output.forward(tape, p, h)
    }

    /// Latents `[B, L, D]` (quantized or continuous) → `theta: [B, 24, 3]`.
    pub fn decode(&self, tape: &mut Tape<S>, p: &Bound, latents: Var) -> Result<Var> {
        let d = &self.decoder;
        let h = d.input.forward(tape, p, latents)?;
        let h = d.pre.forward(tape, p, h)?;
        let h = d.resample.forward(tape, p, h)?;
        let h = d.post.forward(tape, p, h)?;
        let h = tape.gelu(h);
        d.output.forward(tape, p, h)
    }

    /// Straight-through quantization of `z: [B, L, D]`: returns the tokens,
    /// the selected code vectors as a constant, and a node whose value is the
    /// code vectors and whose gradient flows to `z` unchanged.
    pub fn quantize(&self, tape: &mut Tape<S>, z: Var) -> Result<(Vec<usize>, Var, Var)> {
        let shape = tape.shape(z).to_vec();
        let tokens = self.codebook.quantize(tape.value(z).data())?;
        let codes = self.codebook.lookup(&tokens)?.reshape(&shape)?;
        let fixed = tape.constant(codes.clone());
        let st = tape.straight_through(codes, z)?;
        Ok((tokens, fixed, st))
    }

    pub fn encode_values(&self, theta: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let t = tape.constant(theta.clone());
        let z = self.encode(&mut tape, &p, t)?;
        Ok(tape.value(z).clone())
    }

    pub fn decode_values(&self, latents: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = tape.constant(latents.clone());
        let t = self.decode(&mut tape, &p, z)?;
        Ok(tape.value(t).clone())
    }

    /// Token ids for a batch of poses `[B, 24, 3]`, row-major `[B, L]`.
    pub fn tokenize(&self, theta: &Tensor<S>) -> Result<Vec<usize>> {
        let z = self.encode_values(theta)?;
        self.codebook.quantize(z.data())
    }

    /// Code vectors `[B, L, D]` for row-major `[B, L]` tokens.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        let (l, d) = (self.dims.n_tokens, self.dims.code_dim);
        if tokens.len() % l != 0 {
            return Err(Error::Invalid(format!("{} tokens is not a multiple of {l}", tokens.len())));
        }
        Ok(self.codebook.lookup(tokens)?.reshape(&[tokens.len() / l, l, d])?)
    }

    pub fn decode_tokens(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        self.decode_values(&self.embed_tokens(tokens)?)
    }

    pub fn cast<T: Real>(&self) -> PoseTokenizer<T> {
        PoseTokenizer {
            dims: self.dims,
            params: self.params.cast(),
            codebook: self.codebook.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }
}
