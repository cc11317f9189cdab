//! Keypoint-guided gradient refinement of continuous pose latents.

use numcore::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::body::BodyModel;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tokenizer::PoseTokenizer;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub iters: usize,
    pub eta: f64,
    pub lambda: f64,
    /// Also descend on the camera translation.
    pub camera: bool,
}

/// 2D keypoints in pixels with per-joint visibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoints {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl Keypoints {
    pub fn all_visible(points: Vec<[f64; 2]>) -> Self {
        let visible = vec![true; points.len()];
        Self { points, visible }
    }

    pub fn n_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// Constants the objective compares against.
pub struct ObjectiveTargets {
    pub keypoints: Var,
    pub visibility: Var,
    pub theta_init: Var,
}

/// Squared, width-normalised reprojection error over visible joints plus a
/// squared pull of the decoded pose towards its starting value.
#[allow(clippy::too_many_arguments)]
pub fn refine_objective<S: Real>(
    tape: &mut Tape<S>,
    tokenizer: &PoseTokenizer<S>,
    tok_params: &Bound,
    body: &BodyModel<S>,
    latents: Var,
    beta: Var,
    cam_t: Var,
    targets: &ObjectiveTargets,
    lambda: f64,
    image_size: usize,
) -> Result<Var> {
    let theta = tokenizer.decode(tape, tok_params, latents)?;
    let mesh = body.forward(tape, theta, beta)?;
    let uv = body.project(tape, mesh.joints, cam_t)?;
    let err = tape.sub(uv, targets.keypoints)?;
    let err = tape.mul(err, targets.visibility)?;
    let sq = tape.square(err);
    let reproj = tape.sum_all(sq);
    let reproj = tape.mul_scalar(reproj, S::lit(1.0 / (image_size * image_size) as f64));
    let drift = tape.sub(theta, targets.theta_init)?;
    let drift = tape.square(drift);
    let drift = tape.sum_all(drift);
    let drift = tape.mul_scalar(drift, S::lit(lambda));
    Ok(tape.add(reproj, drift)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutput<S> {
    pub latents: Tensor<S>,
    pub theta: Tensor<S>,
    pub cam_t: Tensor<S>,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    /// Steps whose first trial increased the objective and were halved.
    pub halvings: usize,
}

struct Refiner<'a, S: Real> {
    tokenizer: &'a PoseTokenizer<S>,
    body: &'a BodyModel<S>,
    beta: &'a Tensor<S>,
    keypoints: Tensor<S>,
    visibility: Tensor<S>,
    theta_init: Tensor<S>,
    lambda: f64,
    image_size: usize,
}

impl<S: Real> Refiner<'_, S> {
    /// Objective and, when `grads`, its gradients for latents and camera.
    fn eval(&self, y: &Tensor<S>, cam: &Tensor<S>, grads: bool) -> Result<(f64, Option<(Tensor<S>, Tensor<S>)>)> {
        let mut tape = Tape::new();
        let tp = self.tokenizer.params.bind(&mut tape, false);
        let yv = if grads { tape.param(y.clone()) } else { tape.constant(y.clone()) };
        let cv = if grads { tape.param(cam.clone()) } else { tape.constant(cam.clone()) };
        let targets = ObjectiveTargets {
            keypoints: tape.constant(self.keypoints.clone()),
            visibility: tape.constant(self.visibility.clone()),
            theta_init: tape.constant(self.theta_init.clone()),
        };
        let beta = tape.constant(self.beta.clone());
        let g = refine_objective(
            &mut tape,
            self.tokenizer,
            &tp,
            self.body,
            yv,
            beta,
            cv,
            &targets,
            self.lambda,
            self.image_size,
        );
        let g = match g {
            Ok(g) => g,
            Err(Error::NonPositiveDepth { .. }) => return Ok((f64::INFINITY, None)),
            Err(e) => return Err(e),
        };
        let value = tape.value(g).item().to_f64_lossy();
        if !grads {
            return Ok((value, None));
        }
        tape.backward(g)?;
        let gy = tape.grad(yv).unwrap_or_else(|| Tensor::zeros(y.shape()));
        let gc = tape.grad(cv).unwrap_or_else(|| Tensor::zeros(cam.shape()));
        Ok((value, Some((gy, gc))))
    }
}

fn step<S: Real>(x: &Tensor<S>, g: &Tensor<S>, eta: f64) -> Tensor<S> {
    let mut out = x.clone();
    let e = S::lit(eta);
    out.data_mut().iter_mut().zip(g.data()).for_each(|(v, &d)| *v -= e * d);
    out
}

fn finite<S: Real>(t: &Tensor<S>) -> bool {
    t.all_finite()
}

/// Gradient descent on `latents: [1, L, D]` against 2D keypoints, halving
/// the step until the objective does not increase.
pub fn refine_2d<S: Real>(
    tokenizer: &PoseTokenizer<S>,
    body: &BodyModel<S>,
    latents: &Tensor<S>,
    beta: &Tensor<S>,
    cam_t: &Tensor<S>,
    keypoints: &Keypoints,
    image_size: usize,
    cfg: &RefineConfig,
) -> Result<RefineOutput<S>> {
    const MAX_HALVINGS: usize = 20;
    let theta_init = tokenizer.decode_values(latents)?;
    let unchanged = |trace: Vec<f64>| RefineOutput {
        latents: latents.clone(),
        theta: theta_init.clone(),
        cam_t: cam_t.clone(),
        trace,
        halvings: 0,
    };
    if cfg.iters == 0 {
        return Ok(unchanged(Vec::new()));
    }
    let k = body.template.n_regressed();
    if keypoints.points.len() != k || keypoints.visible.len() != k {
        return Err(Error::Invalid(format!(
            "{} keypoints for {k} joints",
            keypoints.points.len()
        )));
    }
    if keypoints.n_visible() == 0 {
        log::warn!("no visible keypoints; skipping refinement");
        return Ok(unchanged(Vec::new()));
    }
    let refiner = Refiner {
        tokenizer,
        body,
        beta,
        keypoints: Tensor::new(
            vec![1, k, 2],
            keypoints.points.iter().flatten().map(|&v| S::lit(v)).collect(),
        )?,
        visibility: Tensor::new(
            vec![1, k, 1],
            keypoints.visible.iter().map(|&v| if v { S::one() } else { S::zero() }).collect(),
        )?,
        theta_init: theta_init.clone(),
        lambda: cfg.lambda,
        image_size,
    };
    let (mut y, mut cam) = (latents.clone(), cam_t.clone());
    let (mut g, _) = refiner.eval(&y, &cam, false)?;
    let mut trace = vec![g];
    let mut halvings = 0;
    for _ in 0..cfg.iters {
        let (_, grads) = refiner.eval(&y, &cam, true)?;
        let Some((gy, gc)) = grads.filter(|(a, b)| finite(a) && finite(b)) else {
            log::warn!("non-finite refinement gradient; stopping");
            break;
        };
        let mut eta = cfg.eta;
        let mut accepted = None;
        for attempt in 0..=MAX_HALVINGS {
            let y_next = step(&y, &gy, eta);
            let cam_next = if cfg.camera { step(&cam, &gc, eta) } else { cam.clone() };
            let (g_next, _) = refiner.eval(&y_next, &cam_next, false)?;
            if g_next.is_finite() && g_next <= g {
                if attempt > 0 {
                    halvings += 1;
                }
                accepted = Some((y_next, cam_next, g_next));
                break;
            }
            eta *= 0.5;
        }
        let Some((y_next, cam_next, g_next)) = accepted else {
            break;
        };
        y = y_next;
        cam = cam_next;
        g = g_next;
        trace.push(g);
    }
    let theta = tokenizer.decode_values(&y)?;
    Ok(RefineOutput {
        latents: y,
        theta,
        cam_t: cam,
        trace,
        halvings,
    })
}
