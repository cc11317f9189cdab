use super::Op;
use crate::error::{NumError, Result};
use crate::real::Real;
use crate::shape::{for_each_offset, strides};
use crate::tape::{accumulate, Tape, Var};
use crate::tensor::Tensor;

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn index_select_backward<S: Real>(
    tape: &Tape<S>,
    x: Var,
    axis: usize,
    indices: &[usize],
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let (outer, mid, inner) = split_at_axis(tape.shape(x), axis);
    let mut gx = vec![S::zero(); outer * mid * inner];
    let sel = indices.len();
    for o in 0..outer {
        for (j, &idx) in indices.iter().enumerate() {
            let src = &g[(o * sel + j) * inner..(o * sel + j + 1) * inner];
            let dst = &mut gx[(o * mid + idx) * inner..(o * mid + idx + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    accumulate(grads, x, gx);
}

pub(super) fn gather_last_backward<S: Real>(
    tape: &Tape<S>,
    x: Var,
    indices: &[usize],
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let k = *tape.shape(x).last().unwrap();
    let mut gx = vec![S::zero(); tape.value(x).numel()];
    for (r, (&idx, &gv)) in indices.iter().zip(g).enumerate() {
        gx[r * k + idx] += gv;
    }
    accumulate(grads, x, gx);
}

pub(super) fn concat_backward<S: Real>(
    tape: &Tape<S>,
    inputs: &[Var],
    axis: usize,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let total: usize = inputs.iter().map(|&v| tape.shape(v)[axis]).sum();
    let (outer, _, inner) = split_at_axis(tape.shape(inputs[0]), axis);
    let mut start = 0;
    for &v in inputs {
        let mid = tape.shape(v)[axis];
        if tape.requires_grad(v) {
            let mut gv = Vec::with_capacity(outer * mid * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                gv.extend_from_slice(&g[base..base + mid * inner]);
            }
            accumulate(grads, v, gv);
        }
        start += mid;
    }
}

fn permuted_strides(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let own = strides(shape);
    let out_shape = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = perm.iter().map(|&p| own[p]).collect();
    (out_shape, in_strides)
}

pub(super) fn permute_backward<S: Real>(
    tape: &Tape<S>,
    x: Var,
    perm: &[usize],
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let (out_shape, in_strides) = permuted_strides(tape.shape(x), perm);
    let mut gx = vec![S::zero(); g.len()];
    let mut k = 0;
    for_each_offset(&out_shape, [&in_strides], |[j]| {
        gx[j] = g[k];
        k += 1;
    });
    accumulate(grads, x, gx);
}

impl<S: Real> Tape<S> {
    /// Selects entries along `axis` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumError::InvalidShape {
                op: "index_select",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, mid, inner) = split_at_axis(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= mid) {
            return Err(NumError::IndexOutOfRange {
                op: "index_select",
                index: bad,
                extent: mid,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &idx in indices {
                let base = (o * mid + idx) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(x, axis, &idx)
    }

    /// Per-row gather along the last axis: `out[r] = x[r, indices[r]]`.
    pub fn gather_last(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap_or(&0);
        let rows: usize = shape[..shape.len().saturating_sub(1)].iter().product();
        if shape.is_empty() || rows != indices.len() {
            return Err(NumError::InvalidShape {
                op: "gather_last",
                shape,
                reason: format!("{} indices for {} rows", indices.len(), rows),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(NumError::IndexOutOfRange {
                op: "gather_last",
                index: bad,
                extent: k,
            });
        }
        let src = self.value(x).data();
        let data = indices.iter().enumerate().map(|(r, &i)| src[r * k + i]).collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.push(
            value,
            Op::GatherLast {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(NumError::InvalidShape {
                op: "concat",
                shape: Vec::new(),
                reason: "no inputs".into(),
            });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(NumError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let mid = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(NumError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(NumError::InvalidShape {
                op: "permute",
                shape,
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let (out_shape, in_strides) = permuted_strides(&shape, perm);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len());
        for_each_offset(&out_shape, [&in_strides], |[j]| data.push(src[j]));
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(NumError::InvalidShape {
                op: "transpose",
                shape: self.shape(x).to_vec(),
                reason: "needs rank >= 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }
}
