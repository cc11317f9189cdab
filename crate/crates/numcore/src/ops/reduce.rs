use super::elementwise::reduce_to;
use super::Op;
use crate::error::{NumError, Result};
use crate::real::Real;
use crate::shape::{broadcast_strides, for_each_offset};
use crate::tape::{accumulate, Tape, Var};
use crate::tensor::Tensor;

fn last_axis<S: Real>(t: &Tensor<S>, op: &'static str) -> Result<usize> {
    match t.shape().last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(NumError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "needs a non-empty last axis".into(),
        }),
    }
}

pub(super) fn sum_backward<S: Real>(
    tape: &Tape<S>,
    x: Var,
    kept: &[usize],
    scale: S,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let xs = tape.shape(x);
    let st = broadcast_strides(kept, xs);
    let mut gx = Vec::with_capacity(tape.value(x).numel());
    for_each_offset(xs, [&st], |[j]| gx.push(g[j] * scale));
    accumulate(grads, x, gx);
}

pub(super) fn softmax_backward<S: Real>(
    tape: &Tape<S>,
    out: usize,
    x: Var,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let y = tape.nodes[out].value.data();
    let n = *tape.shape(x).last().unwrap();
    let mut gx = vec![S::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yi * (gi - dot);
        }
    }
    accumulate(grads, x, gx);
}

pub(super) fn log_softmax_backward<S: Real>(
    tape: &Tape<S>,
    out: usize,
    x: Var,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let y = tape.nodes[out].value.data();
    let n = *tape.shape(x).last().unwrap();
    let mut gx = vec![S::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
        let total: S = gr.iter().copied().sum();
        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
            *d = gi - yi.exp() * total;
        }
    }
    accumulate(grads, x, gx);
}

pub(super) fn layer_norm_backward<S: Real>(
    tape: &Tape<S>,
    x: Var,
    normalized: &[S],
    rstd: &[S],
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let n = *tape.shape(x).last().unwrap();
    let inv_n = S::one() / S::lit(n as f64);
    let mut gx = vec![S::zero(); g.len()];
    for (((xh, gr), dr), &r) in normalized
        .chunks(n)
        .zip(g.chunks(n))
        .zip(gx.chunks_mut(n))
        .zip(rstd)
    {
        let mean_g: S = gr.iter().copied().sum::<S>() * inv_n;
        let mean_gx: S = gr.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>() * inv_n;
        for ((d, &gi), &xi) in dr.iter_mut().zip(gr).zip(xh) {
            *d = r * (gi - mean_g - xi * mean_gx);
        }
    }
    accumulate(grads, x, gx);
}

impl<S: Real> Tape<S> {
    /// Sum over `axes`; with `keepdim` the reduced axes stay as size 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce_axes(x, axes, keepdim, false)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce_axes(x, axes, keepdim, true)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axes(x, &[axis], keepdim, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axes(x, &[axis], keepdim, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce_axes(x, &axes, false, false).expect("valid axes")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce_axes(x, &axes, false, true).expect("valid axes")
    }

    /// Average over the spatial axes of a `[B, H, W, C]` map, giving `[B, C]`.
    pub fn mean_pool_spatial(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(NumError::InvalidShape {
                op: "mean_pool_spatial",
                shape: self.shape(x).to_vec(),
                reason: "expected [B, H, W, C]".into(),
            });
        }
        self.mean_axes(x, &[1, 2], false)
    }

    fn reduce_axes(&mut self, x: Var, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut kept = shape.clone();
        for &a in axes {
            if a >= shape.len() {
                return Err(NumError::InvalidShape {
                    op: if mean { "mean_axes" } else { "sum_axes" },
                    shape,
                    reason: format!("axis {a} out of range"),
                });
            }
            kept[a] = 1;
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product::<usize>().max(1);
        let scale = if mean {
            S::one() / S::lit(count as f64)
        } else {
            S::one()
        };
        let mut data = reduce_to(self.value(x).data(), &shape, &kept);
        if mean {
            data.iter_mut().for_each(|v| *v = *v * scale);
        }
        let out_shape: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::SumAxes { x, kept, scale }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = last_axis(t, "softmax")?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = last_axis(t, "log_softmax")?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax(x)))
    }

    /// Normalizes each last-axis row to zero mean and unit variance.
    /// Affine scale and shift are left to the caller.
    pub fn layer_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let t = self.value(x);
        let n = last_axis(t, "layer_norm")?;
        let inv_n = S::one() / S::lit(n as f64);
        let mut normalized = t.data().to_vec();
        let mut rstd = Vec::with_capacity(t.numel() / n);
        for row in normalized.chunks_mut(n) {
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let r = S::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let value = Tensor::new(t.shape().to_vec(), normalized.clone())?;
        Ok(self.push(value, Op::LayerNorm { x, normalized, rstd }))
    }
}
