//! Pose and mesh error metrics, reported in millimetres.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

fn check_lengths(pred: &[Point], gt: &[Point]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "point count mismatch: {} predicted vs {} reference",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("empty point set".into()));
    }
    Ok(())
}

fn mean_distance_mm(pred: &[Point], gt: &[Point]) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt())
        .sum();
    1000.0 * total / pred.len() as f64
}

/// Mean per-joint position error.
pub fn mpjpe(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok(mean_distance_mm(pred, gt))
}

/// Mean per-vertex error.
pub fn mve(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok(mean_distance_mm(pred, gt))
}

/// Similarity transform `x ↦ s·R·x + t` with `det R = +1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: Point) -> Point {
        let v = self.scale * (self.rotation * Vector3::new(p[0], p[1], p[2])) + self.translation;
        [v.x, v.y, v.z]
    }
}

/// Least-squares similarity alignment of `pred` onto `gt` (no reflections).
pub fn procrustes(pred: &[Point], gt: &[Point]) -> Result<Similarity> {
    check_lengths(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::Degenerate(format!("need at least 3 points, got {}", pred.len())));
    }
    let centroid = |pts: &[Point]| {
        pts.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::new(p[0], p[1], p[2])) / pts.len() as f64
    };
    let (mx, my) = (centroid(pred), centroid(gt));
    let mut cov = Matrix3::zeros();
    let mut spread = 0.0;
    let mut gt_scatter = Matrix3::zeros();
    for (p, g) in pred.iter().zip(gt) {
        let x = Vector3::new(p[0], p[1], p[2]) - mx;
        let y = Vector3::new(g[0], g[1], g[2]) - my;
        cov += y * x.transpose();
        gt_scatter += y * y.transpose();
        spread += x.norm_squared();
    }
    let gt_sv = gt_scatter.svd(false, false).singular_values;
    let mut sv: Vec<f64> = gt_sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= 1e-20 * sv[0] {
        return Err(Error::Degenerate("reference points have rank below 2".into()));
    }
    if spread <= 0.0 {
        return Err(Error::Degenerate("predicted points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let d = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * fix * vt;
    let s = svd.singular_values;
    let scale = (s[0] + s[1] + d * s[2]) / spread;
    let translation = my - scale * rotation * mx;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// MPJPE after optimal similarity alignment.
pub fn pa_mpjpe(pred: &[Point], gt: &[Point]) -> Result<f64> {
    let sim = procrustes(pred, gt)?;
    let aligned: Vec<Point> = pred.iter().map(|&p| sim.apply(p)).collect();
    Ok(mean_distance_mm(&aligned, gt))
}

/// Wall-clock seconds per inference stage for one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub encode: f64,
    pub ugs: f64,
    pub decode: f64,
    pub refine: f64,
    pub total: f64,
}

/// Average inference time per image, per stage.
pub fn aiti(timings: &[StageTimings]) -> Result<StageTimings> {
    if timings.is_empty() {
        return Err(Error::Invalid("no timings to average".into()));
    }
    let n = timings.len() as f64;
    let sum = |f: fn(&StageTimings) -> f64| timings.iter().map(f).sum::<f64>() / n;
    Ok(StageTimings {
        encode: sum(|t| t.encode),
        ugs: sum(|t| t.ugs),
        decode: sum(|t| t.decode),
        refine: sum(|t| t.refine),
        total: sum(|t| t.total),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub mve_mm: f64,
    pub aiti_seconds: StageTimings,
}
