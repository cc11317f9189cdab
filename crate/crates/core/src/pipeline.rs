//! End-to-end building blocks: construct, fit and evaluate the two stages
//! from a [`Config`] and datasets.

use numcore::Real;
use rayon::prelude::*;
use serde::Serialize;

use crate::body::{make_synthetic_template, BodyModel, Intrinsics, NUM_JOINTS};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::inference::{infer, InferConfig, Keypoints, Prediction};
use crate::metrics::{aiti, mpjpe, mve, pa_mpjpe, EvalReport, StageTimings};
use crate::rng::{step_stream, stream, Stream};
use crate::tokenizer::{PoseTokenizer, TokenizerDims};
use crate::training::{
    train_genhmr, train_tokenizer, Dataset, GenHmrTrainer, PoseTargets, Stage2Data, Stage2LogRow, TokenizerLogRow,
    TokenizerTrainer,
};
use crate::transformer::{MaskedTransformer, ModelDims};

impl Intrinsics {
    pub fn from_config(cfg: &Config) -> Self {
        let c = cfg.image_size as f64 / 2.0;
        Self {
            focal: cfg.focal,
            cx: c,
            cy: c,
        }
    }
}

pub fn body_model<S: Real>(cfg: &Config) -> Result<BodyModel<S>> {
    let template = make_synthetic_template(cfg.n_vertices, cfg.template_seed)?;
    Ok(BodyModel::new(template.cast(), Intrinsics::from_config(cfg)))
}

pub fn new_tokenizer<S: Real>(cfg: &Config) -> Result<PoseTokenizer<S>> {
    PoseTokenizer::new(TokenizerDims::from_config(cfg), &mut stream(cfg.seed, Stream::Init))
}

/// Mean camera translation of `data`, used to initialise the camera head.
pub fn mean_translation(data: &Dataset) -> [f64; 3] {
    if data.is_empty() {
        return [0.0, -0.17, 11.5];
    }
    let mut t = [0.0; 3];
    for s in &data.samples {
        for (a, b) in t.iter_mut().zip(s.cam_t) {
            *a += b;
        }
    }
    t.map(|v| v / data.len() as f64)
}

pub fn new_model<S: Real>(cfg: &Config, train: &Dataset) -> Result<MaskedTransformer<S>> {
    let dims = ModelDims::from_config(cfg, train.image_shape[2]);
    MaskedTransformer::new(dims, mean_translation(train), &mut stream(cfg.seed, Stream::ModelInit))
}

/// Trains a fresh tokenizer, or continues `state`, for `steps` steps.
pub fn fit_tokenizer<S: Real>(
    cfg: &Config,
    body: &BodyModel<S>,
    state: Option<TokenizerTrainer<S>>,
    train: &Dataset,
    eval: &Dataset,
    steps: usize,
) -> Result<(TokenizerTrainer<S>, Vec<TokenizerLogRow>)> {
    let mut state = match state {
        Some(s) => s,
        None => TokenizerTrainer::new(new_tokenizer(cfg)?, cfg.tokenizer_lr),
    };
    let train = PoseTargets::build(train, body)?;
    let eval = PoseTargets::build(eval, body)?;
    let log = train_tokenizer(&mut state, body, &train, &eval, cfg, steps)?;
    Ok((state, log))
}

/// Trains a fresh masked transformer, or continues `state`.
pub fn fit_model<S: Real>(
    cfg: &Config,
    tokenizer: &PoseTokenizer<S>,
    body: &BodyModel<S>,
    state: Option<GenHmrTrainer<S>>,
    train: &Dataset,
    eval: &Dataset,
    steps: usize,
) -> Result<(GenHmrTrainer<S>, Vec<Stage2LogRow>)> {
    let mut state = match state {
        Some(s) => s,
        None => GenHmrTrainer::new(new_model(cfg, train)?, cfg.lr),
    };
    let train = Stage2Data::build(train, tokenizer)?;
    let eval = Stage2Data::build(eval, tokenizer)?;
    let log = train_genhmr(&mut state, tokenizer, body, &train, &eval, cfg, steps)?;
    Ok((state, log))
}

/// Errors and timings for one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleEval {
    pub index: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub mve_mm: f64,
    /// Mean absolute 2D joint error divided by the image size.
    pub l2d: f64,
    pub token_accuracy: f64,
    #[serde(skip)]
    pub timings: StageTimings,
    #[serde(skip)]
    pub refine_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub samples: Vec<SampleEval>,
}

/// Ground-truth 2D joints of a sample as fully visible keypoints.
pub fn sample_keypoints(data: &Dataset, index: usize) -> Keypoints {
    Keypoints::all_visible(data.samples[index].joints2d.clone())
}

pub fn score_prediction<S: Real>(
    pred: &Prediction,
    body: &BodyModel<S>,
    data: &Dataset,
    index: usize,
    target_tokens: Option<&[usize]>,
) -> Result<SampleEval> {
    let s = &data.samples[index];
    if pred.joints3d.len() != s.joints3d.len() {
        return Err(Error::Data(format!(
            "sample {index}: {} predicted joints vs {} reference joints",
            pred.joints3d.len(),
            s.joints3d.len()
        )));
    }
    let mesh = body.mesh(
        &crate::body::PoseParams { theta: s.theta.clone() },
        &crate::body::ShapeParams { beta: s.beta.clone() },
    )?;
    let size = data.image_shape[0].max(1) as f64;
    let l2d = pred
        .joints2d
        .iter()
        .zip(&s.joints2d)
        .map(|(p, g)| (p[0] - g[0]).abs() + (p[1] - g[1]).abs())
        .sum::<f64>()
        / (2.0 * pred.joints2d.len() as f64 * size);
    let token_accuracy = target_tokens.map_or(0.0, |t| {
        t.iter().zip(&pred.decode.tokens).filter(|(a, b)| a == b).count() as f64 / t.len().max(1) as f64
    });
    Ok(SampleEval {
        index,
        mpjpe_mm: mpjpe(&pred.joints3d, &s.joints3d)?,
        pa_mpjpe_mm: pa_mpjpe(&pred.joints3d, &s.joints3d)?,
        mve_mm: mve(&pred.vertices, &mesh.vertices)?,
        l2d,
        token_accuracy,
        timings: pred.timings,
        refine_trace: pred.refine_trace.clone(),
    })
}

/// Runs [`infer`] on every sample, with ground-truth 2D keypoints guiding
/// refinement when `guided`. Samples run in parallel, each drawing from
/// its own seeded stream, so results do not depend on the thread count.
pub fn evaluate<S: Real>(
    model: &MaskedTransformer<S>,
    tokenizer: &PoseTokenizer<S>,
    body: &BodyModel<S>,
    data: &Dataset,
    cfg: &InferConfig,
    guided: bool,
    seed: u64,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    if data.image_shape[2] != model.dims.channels || data.samples[0].joints3d.len() != NUM_JOINTS {
        return Err(Error::Data(format!(
            "dataset has {} image channels and {} joints; model expects {} and {NUM_JOINTS}",
            data.image_shape[2],
            data.samples[0].joints3d.len(),
            model.dims.channels
        )));
    }
    let targets = tokenizer.tokenize(&data.pose_batch::<S>(&(0..data.len()).collect::<Vec<_>>())?.0)?;
    let l = tokenizer.dims.n_tokens;
    let samples = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let image = data.image_batch::<S>(&[i])?;
            let kp = guided.then(|| sample_keypoints(data, i));
            let mut rng = step_stream(seed, Stream::Sampling, i);
            let pred = infer(model, tokenizer, body, &image, kp.as_ref(), cfg, &mut rng)?;
            score_prediction(&pred, body, data, i, Some(&targets[i * l..(i + 1) * l]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        report: summarize(&samples)?,
        samples,
    })
}

pub fn summarize(samples: &[SampleEval]) -> Result<EvalReport> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Data("no samples to summarize".into()));
    }
    let mean = |f: fn(&SampleEval) -> f64| samples.iter().map(f).sum::<f64>() / n as f64;
    let timings: Vec<StageTimings> = samples.iter().map(|s| s.timings).collect();
    Ok(EvalReport {
        n_samples: n,
        mpjpe_mm: mean(|s| s.mpjpe_mm),
        pa_mpjpe_mm: mean(|s| s.pa_mpjpe_mm),
        mve_mm: mean(|s| s.mve_mm),
        aiti_seconds: aiti(&timings)?,
    })
}
