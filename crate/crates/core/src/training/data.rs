//! Synthetic pose, camera and heatmap generator.

use numcore::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body::rotation::{axis_angle_to_matrix, mat_mul, matrix_to_axis_angle};
use crate::body::{BodyModel, NUM_BETAS, NUM_JOINTS};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// One labelled sample; the image lives in the owning [`Dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    #[serde(rename = "cam_T")]
    pub cam_t: [f64; 3],
    pub joints3d: Vec<[f64; 3]>,
    pub joints2d: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// `[H, W, C]` per sample when rendered.
    pub images: Option<Vec<Vec<f32>>>,
    pub image_shape: [usize; 3],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacked `[B, 24, 3]` poses and `[B, 10]` shapes for `indices`.
    pub fn pose_batch<S: Real>(&self, indices: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        let b = indices.len();
        let theta = indices
            .iter()
            .flat_map(|&i| self.samples[i].theta.iter().flatten().map(|&x| S::lit(x)))
            .collect();
        let beta = indices
            .iter()
            .flat_map(|&i| self.samples[i].beta.iter().map(|&x| S::lit(x)))
            .collect();
        Ok((
            Tensor::new(vec![b, NUM_JOINTS, 3], theta)?,
            Tensor::new(vec![b, NUM_BETAS], beta)?,
        ))
    }

    /// Stacked `[B, H, W, C]` images for `indices`.
    pub fn image_batch<S: Real>(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let images = self
            .images
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no images".into()))?;
        let [h, w, c] = self.image_shape;
        let data = indices
            .iter()
            .flat_map(|&i| images[i].iter().map(|&x| S::lit(x as f64)))
            .collect();
        Ok(Tensor::new(vec![indices.len(), h, w, c], data)?)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            images: self
                .images
                .as_ref()
                .map(|imgs| indices.iter().map(|&i| imgs[i].clone()).collect()),
            image_shape: self.image_shape,
        }
    }
}

type SparsePose = &'static [(usize, [f64; 3])];

/// Hand-made base poses as (joint, local axis-angle) pairs.
const BASE_POSES: [SparsePose; 8] = [
    &[],
    &[(16, [0.0, 0.0, 0.8]), (17, [0.0, 0.0, -0.8])],
    &[
        (16, [0.0, 0.0, 1.3]),
        (17, [0.0, 0.0, -1.3]),
        (18, [0.0, -0.3, 0.0]),
        (19, [0.0, 0.3, 0.0]),
    ],
    &[(16, [0.0, 0.0, -1.1]), (17, [0.0, 0.0, 1.1]), (15, [-0.3, 0.0, 0.0])],
    &[
        (1, [0.45, 0.0, 0.0]),
        (2, [-0.4, 0.0, 0.0]),
        (5, [0.7, 0.0, 0.0]),
        (16, [0.3, 0.0, 1.2]),
        (17, [-0.3, 0.0, -1.2]),
        (3, [0.0, 0.15, 0.0]),
    ],
    &[
        (1, [-1.3, 0.0, 0.1]),
        (2, [-1.3, 0.0, -0.1]),
        (4, [1.9, 0.0, 0.0]),
        (5, [1.9, 0.0, 0.0]),
        (3, [0.35, 0.0, 0.0]),
        (16, [0.0, 1.2, 0.3]),
        (17, [0.0, -1.2, -0.3]),
    ],
    &[
        (17, [0.0, 0.0, 0.9]),
        (19, [0.0, 1.2, 0.0]),
        (16, [0.0, 0.0, 1.2]),
        (6, [0.25, 0.0, 0.3]),
        (12, [0.0, 0.3, 0.0]),
    ],
    &[
        (1, [-1.1, 0.0, 0.0]),
        (4, [0.4, 0.0, 0.0]),
        (16, [0.0, 0.0, 0.5]),
        (17, [0.0, 0.0, -0.5]),
        (9, [-0.2, 0.0, 0.0]),
        (18, [0.0, -1.6, 0.0]),
        (19, [0.0, 1.6, 0.0]),
    ],
];

pub const N_BASE_POSES: usize = BASE_POSES.len();

/// Draws a pose: base pose plus bounded per-axis noise on the local joints,
/// and a global orientation from a discrete yaw set with a small tilt.
pub fn sample_pose(cfg: &Config, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let base = BASE_POSES[rng.random_range(0..N_BASE_POSES)];
    let mut theta = vec![[0.0; 3]; NUM_JOINTS];
    for &(j, w) in base {
        theta[j] = w;
    }
    for joint in theta.iter_mut().skip(1) {
        for x in joint.iter_mut() {
            *x += cfg.pose_noise * rng.random_range(-1.0..=1.0);
        }
    }
    let yaw = if cfg.yaw_steps <= 1 {
        0.0
    } else {
        let step = rng.random_range(0..cfg.yaw_steps) as f64;
        -cfg.max_yaw + 2.0 * cfg.max_yaw * step / (cfg.yaw_steps - 1) as f64
    };
    let tilt = [
        cfg.max_tilt * rng.random_range(-1.0..=1.0),
        0.0,
        cfg.max_tilt * rng.random_range(-1.0..=1.0),
    ];
    let root = mat_mul(&axis_angle_to_matrix([0.0, yaw, 0.0]), &axis_angle_to_matrix(tilt));
    theta[0] = matrix_to_axis_angle(&root);
    theta
}

/// Renders one Gaussian per joint into a `[H, W, k]` stack; pixel `(c, r)`
/// is centred on integer coordinates.
pub fn render_heatmaps(joints2d: &[[f64; 2]], size: usize, sigma: f64) -> Vec<f32> {
    let k = joints2d.len();
    let mut img = vec![0.0f32; size * size * k];
    let denom = 2.0 * sigma * sigma;
    for r in 0..size {
        for c in 0..size {
            let base = (r * size + c) * k;
            for (j, p) in joints2d.iter().enumerate() {
                let d2 = (c as f64 - p[0]).powi(2) + (r as f64 - p[1]).powi(2);
                img[base + j] = (-d2 / denom).exp() as f32;
            }
        }
    }
    img
}

/// Generates `n` labelled samples; heatmaps are rendered when `render`.
pub fn gen_synthetic_dataset<S: Real>(
    n: usize,
    seed: u64,
    body: &BodyModel<S>,
    cfg: &Config,
    render: bool,
) -> Result<Dataset> {
    let mut rng = stream(seed, Stream::Data);
    let mut samples = Vec::with_capacity(n);
    let mut images = Vec::new();
    for _ in 0..n {
        let theta = sample_pose(cfg, &mut rng);
        let beta: Vec<f64> = (0..NUM_BETAS)
            .map(|_| cfg.beta_range * rng.random_range(-1.0..=1.0))
            .collect();
        let depth = rng.random_range(cfg.depth_min..=cfg.depth_max);
        let cam_t = [
            0.02 * depth * rng.random_range(-1.0..=1.0),
            -0.17 + 0.01 * depth * rng.random_range(-1.0..=1.0),
            depth,
        ];
        let mesh = body.mesh(
            &crate::body::PoseParams { theta: theta.clone() },
            &crate::body::ShapeParams { beta: beta.clone() },
        )?;
        let joints2d = body.project_points(&mesh.joints3d, cam_t)?;
        if render {
            images.push(render_heatmaps(&joints2d, cfg.image_size, cfg.heatmap_sigma));
        }
        samples.push(Sample {
            theta,
            beta,
            cam_t,
            joints3d: mesh.joints3d,
            joints2d,
        });
    }
    Ok(Dataset {
        samples,
        images: render.then_some(images),
        image_shape: [cfg.image_size, cfg.image_size, NUM_JOINTS],
    })
}

/// Counts of samples breaking the generator's guarantees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct InvariantSummary {
    pub samples: usize,
    pub projection_violations: usize,
    pub heatmap_violations: usize,
}

/// Re-projects every sample's 3D joints and, for rendered datasets, checks
/// that each in-frame joint's heatmap peaks within a pixel of it.
pub fn check_invariants<S: Real>(data: &Dataset, body: &BodyModel<S>) -> Result<InvariantSummary> {
    let mut out = InvariantSummary {
        samples: data.len(),
        ..Default::default()
    };
    let [h, w, c] = data.image_shape;
    for (i, s) in data.samples.iter().enumerate() {
        let uv = body.project_points(&s.joints3d, s.cam_t)?;
        let off = uv
            .iter()
            .zip(&s.joints2d)
            .any(|(a, b)| (a[0] - b[0]).abs() > 1e-9 || (a[1] - b[1]).abs() > 1e-9);
        out.projection_violations += usize::from(off);
        let Some(images) = &data.images else { continue };
        let img = &images[i];
        let bad = s.joints2d.iter().enumerate().take(c).any(|(j, p)| {
            let inside = p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64;
            if !inside {
                return false;
            }
            let peak = (0..h * w).max_by(|&a, &b| img[a * c + j].total_cmp(&img[b * c + j])).unwrap_or(0);
            let (r, col) = ((peak / w) as f64, (peak % w) as f64);
            (col - p[0]).abs() > 1.0 || (r - p[1]).abs() > 1.0
        });
        out.heatmap_violations += usize::from(bad);
    }
    Ok(out)
}
