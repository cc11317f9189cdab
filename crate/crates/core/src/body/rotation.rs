//! Axis-angle rotations.

use numcore::{Real, Tape, Tensor, Unary, Var};

use crate::error::Result;

/// Batched Rodrigues formula: `omega: [N, 3]` axis-angle → `[N, 3, 3]`.
///
/// `R = I + a(s)·K + b(s)·K²` with `s = |ω|²`, `a = sin√s/√s`,
/// `b = (1 − cos√s)/s`; both coefficients switch to series expansions near
/// zero so values and gradients stay exact at the rest pose.
pub fn rodrigues<S: Real>(tape: &mut Tape<S>, omega: Var) -> Result<Var> {
    let n = tape.shape(omega)[0];
    let sq = tape.square(omega);
    let s = tape.sum_axis(sq, 1, true)?;
    let a = tape.unary(s, Unary::SinSqrtRatio);
    let b = tape.unary(s, Unary::VersSqrtRatio);

    let neg = tape.neg(omega);
    let zero = tape.constant(Tensor::zeros(&[n, 1]));
    let pool = tape.concat(&[omega, neg, zero], 1)?;
    // columns: 0..3 = (x, y, z), 3..6 = -(x, y, z), 6 = 0
    let skew = tape.index_select(pool, 1, &[6, 5, 1, 2, 6, 3, 4, 0, 6])?;

    let col = tape.reshape(omega, &[n, 3, 1])?;
    let row = tape.reshape(omega, &[n, 1, 3])?;
    let outer = tape.matmul(col, row)?;
    let outer = tape.reshape(outer, &[n, 9])?;
    let eye = tape.constant(Tensor::eye(3).reshape(&[9])?);
    let s_eye = tape.mul(s, eye)?;
    let skew_sq = tape.sub(outer, s_eye)?;

    let lin = tape.mul(a, skew)?;
    let quad = tape.mul(b, skew_sq)?;
    let r = tape.add(lin, quad)?;
    let r = tape.add(r, eye)?;
    Ok(tape.reshape(r, &[n, 3, 3])?)
}

pub type Mat3 = [[f64; 3]; 3];

/// Single axis-angle → rotation matrix.
pub fn axis_angle_to_matrix(w: [f64; 3]) -> Mat3 {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if theta < 1e-12 {
        return [[1.0, -w[2], w[1]], [w[2], 1.0, -w[0]], [-w[1], w[0], 1.0]];
    }
    let k = [w[0] / theta, w[1] / theta, w[2] / theta];
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    [
        [c + k[0] * k[0] * t, k[0] * k[1] * t - k[2] * s, k[0] * k[2] * t + k[1] * s],
        [k[1] * k[0] * t + k[2] * s, c + k[1] * k[1] * t, k[1] * k[2] * t - k[0] * s],
        [k[2] * k[0] * t - k[1] * s, k[2] * k[1] * t + k[0] * s, c + k[2] * k[2] * t],
    ]
}

/// Rotation matrix → axis-angle with angle in `[0, π]`.
pub fn matrix_to_axis_angle(r: &Mat3) -> [f64; 3] {
    // Shepperd: pick the numerically largest quaternion component.
    let tr = r[0][0] + r[1][1] + r[2][2];
    let (w, x, y, z);
    if tr > r[0][0].max(r[1][1]).max(r[2][2]) {
        let s = (1.0 + tr).sqrt() * 2.0;
        w = 0.25 * s;
        x = (r[2][1] - r[1][2]) / s;
        y = (r[0][2] - r[2][0]) / s;
        z = (r[1][0] - r[0][1]) / s;
    } else if r[0][0] >= r[1][1] && r[0][0] >= r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        w = (r[2][1] - r[1][2]) / s;
        x = 0.25 * s;
        y = (r[0][1] + r[1][0]) / s;
        z = (r[0][2] + r[2][0]) / s;
    } else if r[1][1] >= r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        w = (r[0][2] - r[2][0]) / s;
        x = (r[0][1] + r[1][0]) / s;
        y = 0.25 * s;
        z = (r[1][2] + r[2][1]) / s;
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        w = (r[1][0] - r[0][1]) / s;
        x = (r[0][2] + r[2][0]) / s;
        y = (r[1][2] + r[2][1]) / s;
        z = 0.25 * s;
    }
    let (w, x, y, z) = if w < 0.0 { (-w, -x, -y, -z) } else { (w, x, y, z) };
    let sin_half = (x * x + y * y + z * z).sqrt();
    if sin_half < 1e-15 {
        return [2.0 * x, 2.0 * y, 2.0 * z];
    }
    let angle = 2.0 * sin_half.atan2(w);
    [x / sin_half * angle, y / sin_half * angle, z / sin_half * angle]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}
