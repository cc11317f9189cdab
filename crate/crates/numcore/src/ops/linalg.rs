use super::Op;
use crate::error::{NumError, Result};
use crate::real::Real;
use crate::tape::{accumulate, Tape, Var};
use crate::tensor::Tensor;

/// Operand layout for a (possibly batched) product.
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is a single matrix shared across the batch.
    shared_rhs: bool,
}

fn dims(a: &[usize], b: &[usize]) -> Option<(MatmulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let k = a[a.len() - 1];
    if b[b.len() - 2] != k {
        return None;
    }
    let n = b[b.len() - 1];
    let mut out = a[..a.len() - 1].to_vec();
    out.push(n);
    if b.len() == 2 {
        let rows: usize = a[..a.len() - 1].iter().product();
        return Some((
            MatmulDims {
                batch: 1,
                m: rows,
                k,
                n,
                shared_rhs: true,
            },
            out,
        ));
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return None;
    }
    let batch = a[..a.len() - 2].iter().product();
    Some((
        MatmulDims {
            batch,
            m: a[a.len() - 2],
            k,
            n,
            shared_rhs: false,
        },
        out,
    ))
}

pub(super) fn matmul_backward<S: Real>(
    tape: &Tape<S>,
    a: Var,
    b: Var,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let (ta, tb) = (tape.value(a), tape.value(b));
    let (d, _) = dims(ta.shape(), tb.shape()).expect("checked in forward");
    let (m, k, n) = (d.m, d.k, d.n);
    if tape.requires_grad(a) {
        // dA = G · Bᵀ
        let mut ga = vec![S::zero(); ta.numel()];
        for bi in 0..d.batch {
            let boff = if d.shared_rhs { 0 } else { bi * k * n };
            S::gemm(
                m,
                n,
                k,
                &g[bi * m * n..],
                n,
                1,
                &tb.data()[boff..],
                1,
                n,
                &mut ga[bi * m * k..],
                false,
            );
        }
        accumulate(grads, a, ga);
    }
    if tape.requires_grad(b) {
        // dB = Aᵀ · G
        let mut gb = vec![S::zero(); tb.numel()];
        for bi in 0..d.batch {
            let boff = if d.shared_rhs { 0 } else { bi * k * n };
            S::gemm(
                k,
                m,
                n,
                &ta.data()[bi * m * k..],
                1,
                k,
                &g[bi * m * n..],
                n,
                1,
                &mut gb[boff..],
                d.shared_rhs && bi > 0,
            );
        }
        accumulate(grads, b, gb);
    }
}

impl<S: Real> Tape<S> {
    /// Matrix product over the last two axes.
    ///
    /// `a: [..., M, K]` times either a shared `b: [K, N]` or a batch
    /// `b: [..., K, N]` whose leading axes equal those of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (d, out) = dims(ta.shape(), tb.shape()).ok_or_else(|| NumError::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let (m, k, n) = (d.m, d.k, d.n);
        let mut data = vec![S::zero(); d.batch * m * n];
        for bi in 0..d.batch {
            let boff = if d.shared_rhs { 0 } else { bi * k * n };
            S::gemm(
                m,
                k,
                n,
                &ta.data()[bi * m * k..],
                k,
                1,
                &tb.data()[boff..],
                n,
                1,
                &mut data[bi * m * n..],
                false,
            );
        }
        let value = Tensor::new(out, data)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }
}
