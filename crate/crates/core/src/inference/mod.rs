//! Two-stage inference: confidence-guided token decoding followed by
//! optional keypoint-guided latent refinement.

mod refine;
mod schedule;
mod ugs;

use std::time::Instant;

use numcore::{Real, Tensor};
use rand::Rng;
use serde::Serialize;

pub use refine::{refine_2d, refine_objective, Keypoints, ObjectiveTargets, RefineConfig, RefineOutput};
pub use schedule::{gamma, masked_count, sample_topk, trajectory};
pub use ugs::{ugs_decode, ugs_decode_with, DecodeConfig, DecodeRecord, IterationRecord};

use crate::body::{to_points, BodyModel};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::StageTimings;
use crate::tokenizer::PoseTokenizer;
use crate::transformer::MaskedTransformer;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferConfig {
    pub decode: DecodeConfig,
    pub refine: RefineConfig,
}

impl InferConfig {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            decode: DecodeConfig {
                schedule: cfg.schedule,
                iters: cfg.iters,
                topk: cfg.topk,
            },
            refine: RefineConfig {
                iters: cfg.refine_iters,
                eta: cfg.refine_eta,
                lambda: cfg.refine_lambda,
                camera: cfg.refine_camera,
            },
        }
    }
}

/// Everything produced for one image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    pub cam_t: [f64; 3],
    pub vertices: Vec<[f64; 3]>,
    pub joints3d: Vec<[f64; 3]>,
    pub joints2d: Vec<[f64; 2]>,
    pub decode: DecodeRecord,
    pub refine_trace: Vec<f64>,
    pub timings: StageTimings,
}

fn values<S: Real>(t: &Tensor<S>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// Runs the full pipeline on one `[1, H, W, C]` image. Refinement happens
/// only when keypoints are given and `cfg.refine.iters > 0`.
pub fn infer<S: Real>(
    model: &MaskedTransformer<S>,
    tokenizer: &PoseTokenizer<S>,
    body: &BodyModel<S>,
    image: &Tensor<S>,
    keypoints: Option<&Keypoints>,
    cfg: &InferConfig,
    rng: &mut impl Rng,
) -> Result<Prediction> {
    if image.shape().first() != Some(&1) {
        return Err(Error::Invalid(format!("expected a single image, got {:?}", image.shape())));
    }
    let start = Instant::now();
    let feats = model.feature_values(image)?;
    let (beta, cam) = model.shape_camera_values(&feats)?;
    let encode = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let record = ugs_decode(model, &feats, &cfg.decode, rng)?.remove(0);
    let ugs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let latents = tokenizer.embed_tokens(&record.tokens)?;
    let mut theta = tokenizer.decode_values(&latents)?;
    let decode = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut cam_t = cam;
    let mut trace = Vec::new();
    if let Some(kp) = keypoints.filter(|_| cfg.refine.iters > 0) {
        let out = refine_2d(
            tokenizer,
            body,
            &latents,
            &beta,
            &cam_t,
            kp,
            model.dims.image_size,
            &cfg.refine,
        )?;
        theta = out.theta;
        cam_t = out.cam_t;
        trace = out.trace;
    }
    let refine = t.elapsed().as_secs_f64();

    let (v, j) = body.evaluate(&theta, &beta)?;
    let cam_v = values(&cam_t);
    let cam_arr = [cam_v[0], cam_v[1], cam_v[2]];
    let joints3d = to_points(j.data());
    let joints2d = body.project_points(&joints3d, cam_arr)?;
    let total = start.elapsed().as_secs_f64();
    Ok(Prediction {
        theta: to_points(theta.data()),
        beta: values(&beta),
        cam_t: cam_arr,
        vertices: to_points(v.data()),
        joints3d,
        joints2d,
        decode: record,
        refine_trace: trace,
        timings: StageTimings {
            encode,
            ugs,
            decode,
            refine,
            total,
        },
    })
}
