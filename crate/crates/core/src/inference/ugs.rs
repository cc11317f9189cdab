//! Iterative confidence-guided token decoding.

use numcore::{Real, Tensor};
use rand::Rng;
use serde::Serialize;

use super::schedule::{masked_count, sample_topk};
use crate::config::ScheduleKind;
use crate::error::{Error, Result};
use crate::transformer::MaskedTransformer;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub schedule: ScheduleKind,
    pub iters: usize,
    pub topk: usize,
}

/// What one iteration did to one sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IterationRecord {
    /// Slot values after the iteration, mask symbol where still open.
    pub slots: Vec<usize>,
    /// Probability of each slot's sampled token this iteration; frozen slots
    /// keep the confidence they were frozen with.
    pub confidences: Vec<f64>,
    pub newly_frozen: Vec<usize>,
    pub masked: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DecodeRecord {
    pub tokens: Vec<usize>,
    /// Model probability of each final token at the iteration it was frozen.
    pub confidences: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
}

impl DecodeRecord {
    pub fn masked_counts(&self) -> Vec<usize> {
        self.iterations.iter().map(|it| it.masked).collect()
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Decodes `batch` sequences of `len` slots from a fully masked start.
///
/// `logits` maps row-major `[B, L]` slots to `[B, L, K]` logits. Each
/// iteration samples every open slot, then freezes the most confident ones
/// (lower slot index first on ties) so that the schedule's count stays open.
pub fn ugs_decode_with(
    batch: usize,
    len: usize,
    n_codes: usize,
    cfg: &DecodeConfig,
    rng: &mut impl Rng,
    mut logits: impl FnMut(&[usize]) -> Result<Vec<f64>>,
) -> Result<Vec<DecodeRecord>> {
    if cfg.iters == 0 || len == 0 {
        return Err(Error::Invalid("decoding needs at least one iteration and slot".into()));
    }
    let mask = n_codes;
    let mut slots = vec![mask; batch * len];
    let mut conf = vec![0.0; batch * len];
    let mut records = vec![DecodeRecord::default(); batch];
    for t in 1..=cfg.iters {
        let values = logits(&slots)?;
        if values.len() != batch * len * n_codes {
            return Err(Error::Invalid(format!("{} logits for {batch}x{len}x{n_codes}", values.len())));
        }
        let keep_open = masked_count(cfg.schedule, t, cfg.iters, len);
        for (b, record) in records.iter_mut().enumerate() {
            let open: Vec<usize> = (0..len).filter(|&i| slots[b * len + i] == mask).collect();
            let mut drawn = Vec::with_capacity(open.len());
            for &i in &open {
                let r = b * len + i;
                let probs = softmax(&values[r * n_codes..(r + 1) * n_codes]);
                drawn.push((i, sample_topk(&probs, cfg.topk, rng)?));
            }
            let mut ranked = drawn.clone();
            ranked.sort_by(|a, b| b.1 .1.total_cmp(&a.1 .1).then(a.0.cmp(&b.0)));
            let n_freeze = open.len().saturating_sub(keep_open);
            let mut frozen: Vec<usize> = ranked[..n_freeze].iter().map(|&(i, _)| i).collect();
            frozen.sort_unstable();
            for &(i, (tok, p)) in &ranked[..n_freeze] {
                slots[b * len + i] = tok;
                conf[b * len + i] = p;
            }
            let mut shown = conf[b * len..(b + 1) * len].to_vec();
            for &(i, (_, p)) in &drawn {
                if slots[b * len + i] == mask {
                    shown[i] = p;
                }
            }
            record.iterations.push(IterationRecord {
                slots: slots[b * len..(b + 1) * len].to_vec(),
                confidences: shown,
                newly_frozen: frozen,
                masked: open.len() - n_freeze,
            });
        }
    }
    for (b, record) in records.iter_mut().enumerate() {
        record.tokens = slots[b * len..(b + 1) * len].to_vec();
        record.confidences = conf[b * len..(b + 1) * len].to_vec();
    }
    Ok(records)
}

/// [`ugs_decode_with`] driven by a transformer over precomputed features.
pub fn ugs_decode<S: Real>(
    model: &MaskedTransformer<S>,
    feats: &[Tensor<S>],
    cfg: &DecodeConfig,
    rng: &mut impl Rng,
) -> Result<Vec<DecodeRecord>> {
    let batch = feats.first().map(|f| f.shape()[0]).unwrap_or(0);
    let (len, k) = (model.dims.n_tokens, model.dims.n_codes);
    ugs_decode_with(batch, len, k, cfg, rng, |slots| {
        let y = model.logits_values(feats, slots)?;
        Ok(y.data().iter().map(|v| v.to_f64_lossy()).collect())
    })
}
