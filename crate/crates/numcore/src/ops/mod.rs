//! Primitive operations: forward constructors on [`Tape`] and their
//! vector-Jacobian products.

mod elementwise;
mod index;
mod linalg;
mod reduce;
mod sample;

pub use elementwise::Unary;

use crate::real::Real;
use crate::tape::{Tape, Var};

pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, S),
    Unary(Var, Unary<S>),
    SumAxes {
        x: Var,
        kept: Vec<usize>,
        scale: S,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        normalized: Vec<S>,
        rstd: Vec<S>,
    },
    MatMul(Var, Var),
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    GatherLast {
        x: Var,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Bilinear {
        map: Var,
        coords: Var,
    },
    StraightThrough(Var),
}

impl<S> Op<S> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Unary(x, _)
            | Op::SumAxes { x, .. }
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::LayerNorm { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::GatherLast { x, .. }
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::StraightThrough(x) => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Bilinear { map, coords } => vec![*map, *coords],
        }
    }
}

/// Propagates the output gradient `g` of node `i` into its inputs.
pub(crate) fn backprop<S: Real>(tape: &Tape<S>, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let node = &tape.nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => elementwise::add_backward(tape, i, *a, *b, S::one(), g, grads),
        Op::Sub(a, b) => elementwise::add_backward(tape, i, *a, *b, -S::one(), g, grads),
        Op::Mul(a, b) => elementwise::mul_backward(tape, i, *a, *b, g, grads),
        Op::Div(a, b) => elementwise::div_backward(tape, i, *a, *b, g, grads),
        Op::AddScalar(x) => crate::tape::accumulate(grads, *x, g.to_vec()),
        Op::MulScalar(x, c) => {
            crate::tape::accumulate(grads, *x, g.iter().map(|&v| v * *c).collect())
        }
        Op::Unary(x, kind) => elementwise::unary_backward(tape, i, *x, kind, g, grads),
        Op::SumAxes { x, kept, scale } => reduce::sum_backward(tape, *x, kept, *scale, g, grads),
        Op::Softmax(x) => reduce::softmax_backward(tape, i, *x, g, grads),
        Op::LogSoftmax(x) => reduce::log_softmax_backward(tape, i, *x, g, grads),
        Op::LayerNorm {
            x,
            normalized,
            rstd,
        } => reduce::layer_norm_backward(tape, *x, normalized, rstd, g, grads),
        Op::MatMul(a, b) => linalg::matmul_backward(tape, *a, *b, g, grads),
        Op::IndexSelect { x, axis, indices } => {
            index::index_select_backward(tape, *x, *axis, indices, g, grads)
        }
        Op::GatherLast { x, indices } => index::gather_last_backward(tape, *x, indices, g, grads),
        Op::Concat { inputs, axis } => index::concat_backward(tape, inputs, *axis, g, grads),
        Op::Reshape(x) | Op::StraightThrough(x) => crate::tape::accumulate(grads, *x, g.to_vec()),
        Op::Permute { x, perm } => index::permute_backward(tape, *x, perm, g, grads),
        Op::Bilinear { map, coords } => sample::bilinear_backward(tape, *map, *coords, g, grads),
    }
}
