use super::Op;
use crate::error::{NumError, Result};
use crate::real::Real;
use crate::tape::{accumulate, Tape, Var};
use crate::tensor::Tensor;

/// Interpolation stencil for one coordinate axis of extent `n`.
///
/// Coordinates are clamped to `[0, n-1]`; `inside` is false when clamping
/// was active, in which case the sample does not move with the coordinate.
struct Stencil<S> {
    lo: usize,
    hi: usize,
    frac: S,
    inside: bool,
}

fn stencil<S: Real>(c: S, n: usize) -> Stencil<S> {
    let max = S::lit((n - 1) as f64);
    let inside = c > S::zero() && c < max;
    let cc = c.max(S::zero()).min(max);
    if n == 1 {
        return Stencil {
            lo: 0,
            hi: 0,
            frac: S::zero(),
            inside: false,
        };
    }
    let lo = cc.floor().to_usize().unwrap_or(0).min(n - 2);
    Stencil {
        lo,
        hi: lo + 1,
        frac: cc - S::lit(lo as f64),
        inside,
    }
}

fn dims<S: Real>(map: &Tensor<S>, coords: &Tensor<S>) -> Option<(usize, usize, usize, usize, usize)> {
    let (ms, cs) = (map.shape(), coords.shape());
    if ms.len() != 4 || cs.len() != 3 || cs[2] != 2 || ms[0] != cs[0] || ms[1] == 0 || ms[2] == 0 {
        return None;
    }
    Some((ms[0], ms[1], ms[2], ms[3], cs[1]))
}

pub(super) fn bilinear_backward<S: Real>(
    tape: &Tape<S>,
    map: Var,
    coords: Var,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let (tm, tc) = (tape.value(map), tape.value(coords));
    let (b, h, w, c, q) = dims(tm, tc).expect("checked in forward");
    let need_map = tape.requires_grad(map);
    let need_coords = tape.requires_grad(coords);
    let mut gm = vec![S::zero(); if need_map { tm.numel() } else { 0 }];
    let mut gc = vec![S::zero(); if need_coords { tc.numel() } else { 0 }];
    let (md, cd) = (tm.data(), tc.data());
    for bi in 0..b {
        let mbase = bi * h * w * c;
        for qi in 0..q {
            let ci = (bi * q + qi) * 2;
            let sx = stencil(cd[ci], w);
            let sy = stencil(cd[ci + 1], h);
            let (fx, fy) = (sx.frac, sy.frac);
            let o00 = mbase + (sy.lo * w + sx.lo) * c;
            let o01 = mbase + (sy.lo * w + sx.hi) * c;
            let o10 = mbase + (sy.hi * w + sx.lo) * c;
            let o11 = mbase + (sy.hi * w + sx.hi) * c;
            let w00 = (S::one() - fx) * (S::one() - fy);
            let w01 = fx * (S::one() - fy);
            let w10 = (S::one() - fx) * fy;
            let w11 = fx * fy;
            let gq = &g[(bi * q + qi) * c..(bi * q + qi + 1) * c];
            let (mut dx, mut dy) = (S::zero(), S::zero());
            for ch in 0..c {
                let gv = gq[ch];
                if need_map {
                    gm[o00 + ch] += w00 * gv;
                    gm[o01 + ch] += w01 * gv;
                    gm[o10 + ch] += w10 * gv;
                    gm[o11 + ch] += w11 * gv;
                }
                if need_coords {
                    let (v00, v01, v10, v11) = (md[o00 + ch], md[o01 + ch], md[o10 + ch], md[o11 + ch]);
                    dx += gv * ((S::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                    dy += gv * ((S::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if need_coords {
                if sx.inside {
                    gc[ci] = dx;
                }
                if sy.inside {
                    gc[ci + 1] = dy;
                }
            }
        }
    }
    if need_map {
        accumulate(grads, map, gm);
    }
    if need_coords {
        accumulate(grads, coords, gc);
    }
}

impl<S: Real> Tape<S> {
    /// Bilinear interpolation of `map: [B, H, W, C]` at `coords: [B, Q, 2]`.
    ///
    /// Coordinates are `(x, y)` = (column, row) in cell-index units, so the
    /// cell centres sit on integers. Out-of-range coordinates are clamped to
    /// the border. Output is `[B, Q, C]`.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let (tm, tc) = (self.value(map), self.value(coords));
        let (b, h, w, c, q) = dims(tm, tc).ok_or_else(|| NumError::ShapeMismatch {
            op: "bilinear_sample",
            lhs: tm.shape().to_vec(),
            rhs: tc.shape().to_vec(),
        })?;
        let (md, cd) = (tm.data(), tc.data());
        let mut data = Vec::with_capacity(b * q * c);
        for bi in 0..b {
            let mbase = bi * h * w * c;
            for qi in 0..q {
                let ci = (bi * q + qi) * 2;
                let sx = stencil(cd[ci], w);
                let sy = stencil(cd[ci + 1], h);
                let (fx, fy) = (sx.frac, sy.frac);
                let o00 = mbase + (sy.lo * w + sx.lo) * c;
                let o01 = mbase + (sy.lo * w + sx.hi) * c;
                let o10 = mbase + (sy.hi * w + sx.lo) * c;
                let o11 = mbase + (sy.hi * w + sx.hi) * c;
                for ch in 0..c {
                    let top = md[o00 + ch] * (S::one() - fx) + md[o01 + ch] * fx;
                    let bottom = md[o10 + ch] * (S::one() - fx) + md[o11 + ch] * fx;
                    data.push(top * (S::one() - fy) + bottom * fy);
                }
            }
        }
        let value = Tensor::new(vec![b, q, c], data)?;
        Ok(self.push(value, Op::Bilinear { map, coords }))
    }
}
