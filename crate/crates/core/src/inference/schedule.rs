//! Decoding schedules and truncated sampling.

use std::f64::consts::PI;

use rand::Rng;

use crate::config::ScheduleKind;
use crate::error::{Error, Result};
use crate::training::masking::CEIL_SLACK;

/// Fraction of slots still masked at progress `r = t / T ∈ [0, 1]`.
pub fn gamma(kind: ScheduleKind, r: f64) -> f64 {
    let r = r.clamp(0.0, 1.0);
    let g = match kind {
        ScheduleKind::Cosine => 0.5 * (1.0 + (PI * r).cos()),
        ScheduleKind::Linear => 1.0 - r,
        ScheduleKind::Cubic => 1.0 - r * r * r,
        ScheduleKind::Sqrt => (1.0 - r * r).max(0.0).sqrt(),
    };
    g.clamp(0.0, 1.0)
}

/// Slots left masked after iteration `t` of `iters` (1-based); zero at the end.
pub fn masked_count(kind: ScheduleKind, t: usize, iters: usize, len: usize) -> usize {
    if t >= iters {
        return 0;
    }
    let m = (gamma(kind, t as f64 / iters as f64) * len as f64 - CEIL_SLACK).ceil();
    (m.max(0.0) as usize).min(len)
}

/// Masked counts after each of the `iters` iterations.
pub fn trajectory(kind: ScheduleKind, iters: usize, len: usize) -> Vec<usize> {
    (1..=iters).map(|t| masked_count(kind, t, iters, len)).collect()
}

/// Samples from the `k` most likely entries of `probs`, renormalised.
///
/// Returns the choice and its untruncated probability. `k = 1` is a plain
/// argmax (lowest index on ties) and draws nothing from `rng`.
pub fn sample_topk(probs: &[f64], k: usize, rng: &mut impl Rng) -> Result<(usize, f64)> {
    if probs.is_empty() || k == 0 || k > probs.len() {
        return Err(Error::Invalid(format!("top-k {k} over {} classes", probs.len())));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    if k == 1 {
        return Ok((order[0], probs[order[0]]));
    }
    let kept = &order[..k];
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut u = rng.random_range(0.0..1.0) * mass;
    for &i in kept {
        if u < probs[i] {
            return Ok((i, probs[i]));
        }
        u -= probs[i];
    }
    let last = kept[k - 1];
    Ok((last, probs[last]))
}
