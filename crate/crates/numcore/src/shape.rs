//! Broadcasting and stride helpers.

/// Numpy-style broadcast of two shapes (right-aligned; size-1 axes expand).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` viewed inside the broadcast shape `out`: zero along
/// expanded axes.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order, passing the flat
/// offset into each of the strided operands.
pub(crate) fn for_each_offset<const N: usize>(
    shape: &[usize],
    operand_strides: [&[usize]; N],
    mut f: impl FnMut([usize; N]),
) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f([0; N]);
        return;
    }
    let inner = shape[rank - 1];
    let inner_strides: [usize; N] = std::array::from_fn(|k| operand_strides[k][rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut base = [0usize; N];
    let outer = total / inner;
    for _ in 0..outer {
        let mut off = base;
        for _ in 0..inner {
            f(off);
            for k in 0..N {
                off[k] += inner_strides[k];
            }
        }
        // advance the outer multi-index
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            for k in 0..N {
                base[k] += operand_strides[k][axis];
            }
            if idx[axis] < shape[axis] {
                break;
            }
            for k in 0..N {
                base[k] -= operand_strides[k][axis] * shape[axis];
            }
            idx[axis] = 0;
        }
    }
}
