//! Token masking, temperature annealing and Gumbel straight-through sampling.

use std::f64::consts::PI;

use numcore::{Real, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Guards `ceil` against values a rounding error above an integer.
pub(crate) const CEIL_SLACK: f64 = 1e-9;

/// Fraction of tokens masked at training time `tau ∈ [0, 1]`.
pub fn masking_ratio(tau: f64) -> f64 {
    (PI * tau / 2.0).cos().clamp(0.0, 1.0)
}

/// Number of masked slots out of `len` at training time `tau`.
pub fn mask_count(tau: f64, len: usize) -> usize {
    let m = (masking_ratio(tau) * len as f64 - CEIL_SLACK).ceil();
    (m.max(0.0) as usize).min(len)
}

/// Result of masking one token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub slots: Vec<usize>,
    pub masked: Vec<bool>,
    pub tau: f64,
}

/// Draws `tau ~ U[0, max_tau]` and masks `mask_count(tau, L)` distinct slots.
pub fn sample_mask(tokens: &[usize], mask_token: usize, max_tau: f64, rng: &mut impl Rng) -> MaskedSequence {
    let tau = if max_tau > 0.0 { rng.random_range(0.0..=max_tau) } else { 0.0 };
    mask_at(tokens, mask_token, tau, rng)
}

/// Masks `mask_count(tau, L)` uniformly chosen distinct slots.
pub fn mask_at(tokens: &[usize], mask_token: usize, tau: f64, rng: &mut impl Rng) -> MaskedSequence {
    let l = tokens.len();
    let m = mask_count(tau, l);
    let mut slots = tokens.to_vec();
    let mut masked = vec![false; l];
    for i in sample(rng, l, m) {
        slots[i] = mask_token;
        masked[i] = true;
    }
    MaskedSequence { slots, masked, tau }
}

/// Cosine decay of the sampling temperature over the first
/// `fraction · total_steps` steps, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub start: f64,
    pub end: f64,
    pub fraction: f64,
    pub total_steps: usize,
}

impl AnnealSchedule {
    pub fn anneal_steps(&self) -> f64 {
        self.fraction * self.total_steps as f64
    }
}

pub fn anneal_tau(step: usize, sched: &AnnealSchedule) -> f64 {
    let span = sched.anneal_steps();
    let t = step as f64;
    if span <= 0.0 || t >= span {
        return sched.end;
    }
    sched.end + 0.5 * (sched.start - sched.end) * (1.0 + (t * PI / span).cos())
}

/// Standard Gumbel draws `-ln(-ln u)`.
pub fn gumbel_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Straight-through Gumbel-Softmax over the last axis of `logits`.
///
/// Returns the hard choices and a node whose value is their one-hot
/// encoding and whose gradient is that of `softmax((logits + noise) / tau)`.
pub fn gumbel_softmax<S: Real>(tape: &mut Tape<S>, logits: Var, noise: &[f64], tau: f64) -> Result<(Vec<usize>, Var)> {
    let shape = tape.shape(logits).to_vec();
    let k = *shape.last().unwrap_or(&0);
    if k == 0 {
        return Err(Error::Invalid(format!("empty logits {shape:?}")));
    }
    let (hard, soft) = perturbed_softmax(tape, logits, noise, tau)?;
    let mut onehot = Tensor::zeros(&shape);
    for (r, &h) in hard.iter().enumerate() {
        onehot.data_mut()[r * k + h] = S::one();
    }
    Ok((hard, tape.straight_through(onehot, soft)?))
}

/// `softmax((logits + noise) / tau)` over the last axis, with the argmax of
/// each perturbed row.
pub fn perturbed_softmax<S: Real>(tape: &mut Tape<S>, logits: Var, noise: &[f64], tau: f64) -> Result<(Vec<usize>, Var)> {
    let shape = tape.shape(logits).to_vec();
    if noise.len() != tape.value(logits).numel() {
        return Err(Error::Invalid(format!("{} noise values for logits {shape:?}", noise.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let noise = tape.constant(Tensor::new(shape, noise.iter().map(|&v| S::lit(v)).collect())?);
    let perturbed = tape.add(logits, noise)?;
    let hard: Vec<usize> = tape.value(perturbed).rows().map(argmax).collect();
    let scaled = tape.mul_scalar(perturbed, S::lit(1.0 / tau));
    Ok((hard, tape.softmax(scaled)?))
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
