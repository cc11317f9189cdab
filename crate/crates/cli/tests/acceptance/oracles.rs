use std::time::Instant;

use genhmr::body::rodrigues;
use genhmr::metrics::{mpjpe, mve, pa_mpjpe, Point};
use genhmr::params::ParamStore;
use genhmr::tokenizer::Codebook;
use genhmr::transformer::DeformableAttention;
use numcore::{Tape, Tape64, Tensor, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Checks;

const BUDGET_S: f64 = 60.0;
const TOL: f64 = 1e-10;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn quantize_vs_exhaustive(checks: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for case in 0..1000 {
        let (k, d) = (1 + case % 17, 1 + case % 5);
        let codes: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = Codebook::from_codes(Tensor::new(vec![k, d], codes.clone()).unwrap());
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut best = (f64::INFINITY, 0);
        for c in 0..k {
            let dist: f64 = (0..d).map(|i| (z[i] - codes[c * d + i]).powi(2)).sum::<f64>().sqrt();
            if dist < best.0 {
                best = (dist, c);
            }
        }
        if cb.quantize(&z).unwrap() != vec![best.1] {
            mismatches += 1;
        }
    }
    checks.expect(mismatches == 0, format!("quantize: {mismatches}/1000 mismatches"));
}

/// Clamped bilinear lookup written from the definition.
fn sample_naive(map: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64) -> Vec<f64> {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |r: usize, col: usize, ch: usize| map[(r * w + col) * c + ch];
    (0..c)
        .map(|ch| {
            at(y0, x0, ch) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x1, ch) * fx * (1.0 - fy)
                + at(y1, x0, ch) * (1.0 - fx) * fy
                + at(y1, x1, ch) * fx * fy
        })
        .collect()
}

fn affine(x: &[f64], w: &Tensor64, b: &Tensor64) -> Vec<f64> {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    (0..n_out)
        .map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + j]).sum::<f64>())
        .collect()
}

fn msda_case_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..3);
    let l = rng.random_range(1..5);
    let d = rng.random_range(1..5);
    let levels = rng.random_range(1..4);
    let points = rng.random_range(1..4);
    let mut store = ParamStore::<f64>::new();
    let attn = DeformableAttention::new(&mut store, "x", d, levels, points, &mut rng);
    for v in store.values_mut() {
        v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-1.5..1.5));
    }
    let maps: Vec<Tensor64> = (0..levels)
        .map(|_| {
            let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
            Tensor::from_fn(&[b, h, w, d], |_| rng.random_range(-1.0..1.0))
        })
        .collect();
    let queries = Tensor64::from_fn(&[b, l, d], |_| rng.random_range(-1.0..1.0));
    let refs = Tensor64::from_fn(&[l, 2], |_| rng.random_range(0.0..1.0));

    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let q = tape.constant(queries.clone());
    let r = tape.constant(refs.clone());
    let f: Vec<Var> = maps.iter().map(|m| tape.constant(m.clone())).collect();
    let y = attn.forward(&mut tape, &p, q, r, &f).unwrap();
    let got = tape.value(y).data().to_vec();

    let mut want = Vec::new();
    for bi in 0..b {
        for qi in 0..l {
            let qv = &queries.data()[(bi * l + qi) * d..(bi * l + qi + 1) * d];
            let off = affine(qv, store.get(attn.offsets.weight), store.get(attn.offsets.bias));
            let logits = affine(qv, store.get(attn.weights.weight), store.get(attn.weights.bias));
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
            let (rx, ry) = (refs.data()[qi * 2], refs.data()[qi * 2 + 1]);
            let mut acc = vec![0.0; d];
            for (li, m) in maps.iter().enumerate() {
                let (h, w) = (m.shape()[1], m.shape()[2]);
                let map = &m.data()[bi * h * w * d..(bi + 1) * h * w * d];
                for k in 0..points {
                    let j = li * points + k;
                    let weight = (logits[j] - mx).exp() / z;
                    let x = rx * w as f64 - 0.5 + off[j * 2];
                    let y = ry * h as f64 - 0.5 + off[j * 2 + 1];
                    for (a, v) in acc.iter_mut().zip(sample_naive(map, h, w, d, x, y)) {
                        *a += weight * v;
                    }
                }
            }
            want.extend(affine(&acc, store.get(attn.value.weight), store.get(attn.value.bias)));
        }
    }
    max_abs_diff(&got, &want)
}

fn msda_vs_naive(checks: &mut Checks) {
    let worst = (0..100).map(msda_case_error).fold(0.0, f64::max);
    checks.expect(worst < TOL, format!("deformable attention: 100 cases, max diff {worst:.1e}"));
}

/// Rotation matrix obtained by conjugating basis vectors with the unit quaternion.
fn quaternion_rotation(w: [f64; 3]) -> [[f64; 3]; 3] {
    let angle = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (qw, qx, qy, qz) = if angle == 0.0 {
        (1.0, 0.0, 0.0, 0.0)
    } else {
        let s = (angle / 2.0).sin() / angle;
        ((angle / 2.0).cos(), w[0] * s, w[1] * s, w[2] * s)
    };
    let rotate = |v: [f64; 3]| -> [f64; 3] {
        let (aw, ax, ay, az) = (
            -qx * v[0] - qy * v[1] - qz * v[2],
            qw * v[0] + qy * v[2] - qz * v[1],
            qw * v[1] + qz * v[0] - qx * v[2],
            qw * v[2] + qx * v[1] - qy * v[0],
        );
        [
            -aw * qx + ax * qw - ay * qz + az * qy,
            -aw * qy + ay * qw - az * qx + ax * qz,
            -aw * qz + az * qw - ax * qy + ay * qx,
        ]
    };
    let cols = [rotate([1.0, 0.0, 0.0]), rotate([0.0, 1.0, 0.0]), rotate([0.0, 0.0, 1.0])];
    let mut m = [[0.0; 3]; 3];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..3 {
            m[i][j] = c[i];
        }
    }
    m
}

fn rodrigues_vs_quaternion(checks: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ws: Vec<[f64; 3]> = (0..1000).map(|_| [0, 1, 2].map(|_| rng.random_range(-3.0..3.0))).collect();
    ws.extend((0..200).map(|_| [0, 1, 2].map(|_| rng.random_range(-0.05..0.05))));
    ws.extend([[0.0; 3], [1e-9, -2e-9, 0.0], [0.05, 0.0, 0.01], [0.0, 0.0, std::f64::consts::PI]]);
    let mut tape = Tape64::new();
    let x = tape.constant(Tensor64::new(vec![ws.len(), 3], ws.iter().flatten().copied().collect()).unwrap());
    let r = rodrigues(&mut tape, x).unwrap();
    let got = tape.value(r).data();
    let want: Vec<f64> = ws.iter().flat_map(|&w| quaternion_rotation(w).into_iter().flatten()).collect();
    let err = max_abs_diff(got, &want);
    checks.expect(err < TOL, format!("rodrigues: {} rotations, max diff {err:.1e}", ws.len()));
}

fn naive_mean_distance_mm(a: &[Point], b: &[Point]) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        let mut sq = 0.0;
        for k in 0..3 {
            sq += (a[i][k] - b[i][k]) * (a[i][k] - b[i][k]);
        }
        total += sq.sqrt();
    }
    1000.0 * total / a.len() as f64
}

/// Eigen-decomposition of a symmetric 4x4 matrix by cyclic Jacobi rotations.
fn jacobi_eigen(mut a: [[f64; 4]; 4]) -> ([f64; 4], [[f64; 4]; 4]) {
    let mut v = [[0.0; 4]; 4];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..4).flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..4 {
            for q in p + 1..4 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2], a[3][3]], v)
}

/// Similarity-aligned error via the quaternion (Horn) closed form.
fn horn_pa_mpjpe(pred: &[Point], gt: &[Point]) -> f64 {
    let n = pred.len() as f64;
    let mean = |pts: &[Point]| [0, 1, 2].map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n);
    let (mp, mg) = (mean(pred), mean(gt));
    let p: Vec<Point> = pred.iter().map(|q| [0, 1, 2].map(|k| q[k] - mp[k])).collect();
    let g: Vec<Point> = gt.iter().map(|q| [0, 1, 2].map(|k| q[k] - mg[k])).collect();
    let mut s = [[0.0; 3]; 3];
    for (a, b) in p.iter().zip(&g) {
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += a[i] * b[j];
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let nmat = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (vals, vecs) = jacobi_eigen(nmat);
    let best = (0..4).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let [w, x, y, z] = [0, 1, 2, 3].map(|i| vecs[i][best]);
    let r = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let spread: f64 = p.iter().map(|q| q.iter().map(|v| v * v).sum::<f64>()).sum();
    let scale = vals[best] / spread;
    let aligned: Vec<Point> = p
        .iter()
        .map(|q| [0, 1, 2].map(|i| mg[i] + scale * (0..3).map(|j| r[i][j] * q[j]).sum::<f64>()))
        .collect();
    naive_mean_distance_mm(&aligned, gt)
}

fn metrics_vs_naive(checks: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut worst_pa: f64 = 0.0;
    for case in 0..200 {
        let n = [3, 5, 24, 128][case % 4];
        let gt: Vec<Point> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
        let noise = rng.random_range(0.0..0.5);
        let pred: Vec<Point> = gt.iter().map(|p| p.map(|v| 0.8 * v + 0.3 + noise * rng.random_range(-1.0..1.0))).collect();
        let want = naive_mean_distance_mm(&pred, &gt);
        worst = worst.max((mpjpe(&pred, &gt).unwrap() - want).abs());
        worst = worst.max((mve(&pred, &gt).unwrap() - want).abs());
        worst_pa = worst_pa.max((pa_mpjpe(&pred, &gt).unwrap() - horn_pa_mpjpe(&pred, &gt)).abs());
    }
    checks.expect(worst < TOL, format!("mpjpe/mve: max diff {worst:.1e}"));
    checks.expect(worst_pa < TOL, format!("pa-mpjpe vs quaternion alignment: max diff {worst_pa:.1e}"));
}

pub fn criterion(checks: &mut Checks) {
    let start = Instant::now();
    quantize_vs_exhaustive(checks);
    msda_vs_naive(checks);
    rodrigues_vs_quaternion(checks);
    metrics_vs_naive(checks);
    checks.within("runtime", start.elapsed().as_secs_f64(), BUDGET_S);
}
