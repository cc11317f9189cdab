use super::Op;
use crate::error::{NumError, Result};
use crate::real::Real;
use crate::shape::{broadcast_shape, broadcast_strides, for_each_offset};
use crate::tape::{accumulate, Tape, Var};
use crate::tensor::Tensor;

/// Elementwise unary functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<S> {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Sqrt,
    Abs,
    Square,
    Relu,
    Sigmoid,
    Softplus,
    /// tanh approximation of GELU.
    Gelu,
    Powf(S),
    /// `sin(√s)/√s`, with a series branch near zero.
    SinSqrtRatio,
    /// `(1 − cos√s)/s`, with a series branch near zero.
    VersSqrtRatio,
}

/// Below this value of `s = θ²` the rotation coefficients use their series.
const SERIES_LIMIT: f64 = 1e-2;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn poly<S: Real>(x: S, coeffs: &[f64]) -> S {
    coeffs
        .iter()
        .rev()
        .fold(S::zero(), |acc, &c| acc * x + S::lit(c))
}

const SIN_RATIO: [f64; 5] = [1.0, -1.0 / 6.0, 1.0 / 120.0, -1.0 / 5040.0, 1.0 / 362_880.0];
const SIN_RATIO_D: [f64; 4] = [-1.0 / 6.0, 1.0 / 60.0, -1.0 / 1680.0, 1.0 / 90_720.0];
const VERS_RATIO: [f64; 5] = [0.5, -1.0 / 24.0, 1.0 / 720.0, -1.0 / 40_320.0, 1.0 / 3_628_800.0];
const VERS_RATIO_D: [f64; 4] = [-1.0 / 24.0, 1.0 / 360.0, -1.0 / 13_440.0, 1.0 / 907_200.0];

impl<S: Real> Unary<S> {
    pub fn apply(&self, x: S) -> S {
        match *self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Tanh => x.tanh(),
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Relu => x.max(S::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => x.max(S::zero()) + (-x.abs()).exp().ln_1p(),
            Unary::Gelu => {
                let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
                S::lit(0.5) * x * (S::one() + exp_tanh(u))
            }
            Unary::Powf(p) => x.powf(p),
            Unary::SinSqrtRatio => {
                if x < S::lit(SERIES_LIMIT) {
                    poly(x, &SIN_RATIO)
                } else {
                    let t = x.sqrt();
                    t.sin() / t
                }
            }
            Unary::VersSqrtRatio => {
                if x < S::lit(SERIES_LIMIT) {
                    poly(x, &VERS_RATIO)
                } else {
                    (S::one() - x.sqrt().cos()) / x
                }
            }
        }
    }

    /// Derivative at `x`, given the forward output `y`.
    pub fn derivative(&self, x: S, y: S) -> S {
        match *self {
            Unary::Neg => -S::one(),
            Unary::Exp => y,
            Unary::Log => S::one() / x,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Tanh => S::one() - y * y,
            Unary::Sqrt => S::lit(0.5) / y,
            Unary::Abs => {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            }
            Unary::Square => S::lit(2.0) * x,
            Unary::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Unary::Sigmoid => y * (S::one() - y),
            Unary::Softplus => sigmoid(x),
            Unary::Gelu => {
                let x2 = x * x;
                let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x2 * x);
                let t = exp_tanh(u);
                let du = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_A) * x2);
                S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * du
            }
            Unary::Powf(p) => p * x.powf(p - S::one()),
            Unary::SinSqrtRatio => {
                if x < S::lit(SERIES_LIMIT) {
                    poly(x, &SIN_RATIO_D)
                } else {
                    let t = x.sqrt();
                    (t * t.cos() - t.sin()) / (S::lit(2.0) * t * x)
                }
            }
            Unary::VersSqrtRatio => {
                if x < S::lit(SERIES_LIMIT) {
                    poly(x, &VERS_RATIO_D)
                } else {
                    let t = x.sqrt();
                    (t * t.sin() - S::lit(2.0) * (S::one() - t.cos())) / (S::lit(2.0) * x * x)
                }
            }
        }
    }
}

fn exp_tanh<S: Real>(u: S) -> S {
    S::one() - S::lit(2.0) / ((u + u).exp() + S::one())
}

/// Length of the trailing block `inner` covers when its shape, minus leading
/// unit axes, is a suffix of `outer`.
fn trailing_block(outer: &[usize], inner: &[usize]) -> Option<usize> {
    let lead = inner.iter().take_while(|&&d| d == 1).count();
    let core = &inner[lead..];
    if inner.len() > outer.len() || !outer.ends_with(core) {
        return None;
    }
    Some(core.iter().product())
}

fn broadcast_op<S: Real>(
    name: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.numel() == 1 && b.rank() <= a.rank() {
        let y = b.data()[0];
        return Ok(a.map(|x| f(x, y)));
    }
    if let Some(n) = trailing_block(a.shape(), b.shape()).filter(|&n| n > 0) {
        let db = b.data();
        let data = a.data().chunks(n).flat_map(|row| row.iter().zip(db).map(|(&x, &y)| f(x, y))).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| NumError::ShapeMismatch {
        op: name,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = Vec::with_capacity(out.iter().product());
    let (da, db) = (a.data(), b.data());
    for_each_offset(&out, [&sa, &sb], |[i, j]| data.push(f(da[i], db[j])));
    Tensor::new(out, data)
}

/// Sums `g` (shaped `out`) down to `target` over the broadcast axes.
pub(crate) fn reduce_to<S: Real>(g: &[S], out: &[usize], target: &[usize]) -> Vec<S> {
    if out == target {
        return g.to_vec();
    }
    let n: usize = target.iter().product();
    let mut acc = vec![S::zero(); n];
    if n > 0 && trailing_block(out, target) == Some(n) {
        for row in g.chunks(n) {
            acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        return acc;
    }
    let st = broadcast_strides(target, out);
    let mut k = 0;
    for_each_offset(out, [&st], |[j]| {
        acc[j] += g[k];
        k += 1;
    });
    acc
}

/// Walks the broadcast output, calling `f(k, i, j)` with the flat offsets of
/// the output, `a`, and `b`.
fn walk_pair<S: Real>(a: &Tensor<S>, b: &Tensor<S>, out: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut k = 0;
    for_each_offset(out, [&sa, &sb], |[i, j]| {
        f(k, i, j);
        k += 1;
    });
}

pub(super) fn add_backward<S: Real>(
    tape: &Tape<S>,
    out: usize,
    a: Var,
    b: Var,
    sign_b: S,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let out_shape = tape.nodes[out].value.shape();
    if tape.requires_grad(a) {
        accumulate(grads, a, reduce_to(g, out_shape, tape.shape(a)));
    }
    if tape.requires_grad(b) {
        let mut gb = reduce_to(g, out_shape, tape.shape(b));
        if sign_b != S::one() {
            gb.iter_mut().for_each(|v| *v = *v * sign_b);
        }
        accumulate(grads, b, gb);
    }
}

pub(super) fn mul_backward<S: Real>(
    tape: &Tape<S>,
    out: usize,
    a: Var,
    b: Var,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let (ta, tb) = (tape.value(a), tape.value(b));
    let out_shape = tape.nodes[out].value.shape();
    let (need_a, need_b) = (tape.requires_grad(a), tape.requires_grad(b));
    let mut ga = vec![S::zero(); if need_a { ta.numel() } else { 0 }];
    let mut gb = vec![S::zero(); if need_b { tb.numel() } else { 0 }];
    let (da, db) = (ta.data(), tb.data());
    walk_pair(ta, tb, out_shape, |k, i, j| {
        if need_a {
            ga[i] += g[k] * db[j];
        }
        if need_b {
            gb[j] += g[k] * da[i];
        }
    });
    if need_a {
        accumulate(grads, a, ga);
    }
    if need_b {
        accumulate(grads, b, gb);
    }
}

pub(super) fn div_backward<S: Real>(
    tape: &Tape<S>,
    out: usize,
    a: Var,
    b: Var,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let (ta, tb) = (tape.value(a), tape.value(b));
    let out_shape = tape.nodes[out].value.shape();
    let (need_a, need_b) = (tape.requires_grad(a), tape.requires_grad(b));
    let mut ga = vec![S::zero(); if need_a { ta.numel() } else { 0 }];
    let mut gb = vec![S::zero(); if need_b { tb.numel() } else { 0 }];
    let (da, db) = (ta.data(), tb.data());
    walk_pair(ta, tb, out_shape, |k, i, j| {
        if need_a {
            ga[i] += g[k] / db[j];
        }
        if need_b {
            gb[j] -= g[k] * da[i] / (db[j] * db[j]);
        }
    });
    if need_a {
        accumulate(grads, a, ga);
    }
    if need_b {
        accumulate(grads, b, gb);
    }
}

pub(super) fn unary_backward<S: Real>(
    tape: &Tape<S>,
    out: usize,
    x: Var,
    kind: &Unary<S>,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let xs = tape.value(x).data();
    let ys = tape.nodes[out].value.data();
    let gx = g
        .iter()
        .zip(xs.iter().zip(ys))
        .map(|(&gi, (&xi, &yi))| gi * kind.derivative(xi, yi))
        .collect();
    accumulate(grads, x, gx);
}

impl<S: Real> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_op("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_op("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_op("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_op("div", self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: S) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::MulScalar(x, c))
    }

    pub fn unary(&mut self, x: Var, kind: Unary<S>) -> Var {
        let v = self.value(x).map(|e| kind.apply(e));
        self.push(v, Op::Unary(x, kind))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }
    pub fn powf(&mut self, x: Var, p: S) -> Var {
        self.unary(x, Unary::Powf(p))
    }

    /// Forward value is `value`; the backward pass routes the incoming
    /// gradient unchanged to `source` (straight-through estimator).
    pub fn straight_through(&mut self, value: Tensor<S>, source: Var) -> Result<Var> {
        if value.shape() != self.shape(source) {
            return Err(NumError::ShapeMismatch {
                op: "straight_through",
                lhs: value.shape().to_vec(),
                rhs: self.shape(source).to_vec(),
            });
        }
        Ok(self.push(value, Op::StraightThrough(source)))
    }

    /// Stop-gradient: same value, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }
}
