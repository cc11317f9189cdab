//! Small layer library built on tape primitives.

use numcore::{Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{normal, Bound, ParamId, ParamStore};

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (inputs as f64).sqrt();
        Self::with_std(store, name, inputs, outputs, std, rng)
    }

    pub fn with_std<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), normal(rng, &[inputs, outputs], std));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        Ok(tape.add(y, p[self.bias])?)
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], S::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, S::lit(1e-5))?;
        let g = tape.mul(n, p[self.gain])?;
        Ok(tape.add(g, p[self.bias])?)
    }
}

/// Same-padded 1D convolution over axis 1 of `[B, N, C]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub channels: usize,
    pub proj: Linear,
}

impl Conv1d {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        outputs: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        Self {
            kernel,
            channels,
            proj: Linear::new(store, name, kernel * channels, outputs, rng),
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        let pad = self.kernel / 2;
        let cols = if pad == 0 {
            x
        } else {
            let zeros = tape.constant(Tensor::zeros(&[b, pad, c]));
            let padded = tape.concat(&[zeros, x, zeros], 1)?;
            let windows = (0..self.kernel)
                .map(|o| tape.slice(padded, 1, o, n))
                .collect::<numcore::Result<Vec<_>>>()?;
            tape.concat(&windows, 2)?
        };
        self.proj.forward(tape, p, cols)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, p, h)
    }
}

/// Multi-head scaled dot-product self-attention over axis 1 of `[B, N, D]`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl SelfAttention {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            heads,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let split = |tape: &mut Tape<S>, v: Var, perm: &[usize]| -> Result<Var> {
            let r = tape.reshape(v, &[b, n, h, dh])?;
            Ok(tape.permute(r, perm)?)
        };
        let q = self.query.forward(tape, p, x)?;
        let q = split(tape, q, &[0, 2, 1, 3])?;
        let k = self.key.forward(tape, p, x)?;
        let k = split(tape, k, &[0, 2, 3, 1])?;
        let v = self.value.forward(tape, p, x)?;
        let v = split(tape, v, &[0, 2, 1, 3])?;
        let scores = tape.matmul(q, k)?;
        let scores = tape.mul_scalar(scores, S::lit(1.0 / (dh as f64).sqrt()));
        let attn = tape.softmax(scores)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, d])?;
        self.out.forward(tape, p, ctx)
    }
}
