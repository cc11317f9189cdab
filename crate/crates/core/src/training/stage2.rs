//! Masked transformer training with a frozen tokenizer.

use numcore::{Real, Tape, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use super::data::Dataset;
use super::masking::{anneal_tau, argmax, gumbel_noise, gumbel_softmax, sample_mask, AnnealSchedule};
use crate::body::BodyModel;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::Bound;
use crate::rng::{step_stream, Stream};
use crate::tokenizer::PoseTokenizer;
use crate::transformer::MaskedTransformer;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Weights {
    pub mask: f64,
    pub theta: f64,
    pub beta: f64,
    pub joints3d: f64,
    pub joints2d: f64,
}

impl Stage2Weights {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            mask: cfg.lambda_mask,
            theta: cfg.lambda_theta,
            beta: cfg.lambda_beta,
            joints3d: cfg.lambda_3d,
            joints2d: cfg.lambda_2d,
        }
    }
}

/// Images, ground truth and target tokens stacked for batching.
#[derive(Clone, Debug)]
pub struct Stage2Data<S> {
    pub images: Tensor<S>,
    pub tokens: Vec<usize>,
    pub theta: Tensor<S>,
    pub beta: Tensor<S>,
    pub joints3d: Tensor<S>,
    pub joints2d: Tensor<S>,
}

fn stack_points<S: Real, const N: usize>(rows: impl Iterator<Item = Vec<[f64; N]>>, n: usize) -> Result<Tensor<S>> {
    let mut k = 0;
    let mut data = Vec::new();
    for r in rows {
        k = r.len();
        data.extend(r.iter().flatten().map(|&v| S::lit(v)));
    }
    Ok(Tensor::new(vec![n, k, N], data)?)
}

fn gather_rows<S: Real>(t: &Tensor<S>, rows: &[usize]) -> Result<Tensor<S>> {
    let width = t.numel() / t.shape()[0].max(1);
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Ok(Tensor::new(shape, data)?)
}

impl<S: Real> Stage2Data<S> {
    /// Stacks a rendered dataset and tokenizes its poses.
    pub fn build(data: &Dataset, tokenizer: &PoseTokenizer<S>) -> Result<Self> {
        let all: Vec<usize> = (0..data.len()).collect();
        let images = data.image_batch::<S>(&all)?;
        let (theta, beta) = data.pose_batch::<S>(&all)?;
        let mut tokens = Vec::with_capacity(data.len() * tokenizer.dims.n_tokens);
        for chunk in all.chunks(256) {
            let (t, _) = data.pose_batch::<S>(chunk)?;
            tokens.extend(tokenizer.tokenize(&t)?);
        }
        let n = data.len();
        Ok(Self {
            images,
            tokens,
            theta,
            beta,
            joints3d: stack_points(data.samples.iter().map(|s| s.joints3d.clone()), n)?,
            joints2d: stack_points(data.samples.iter().map(|s| s.joints2d.clone()), n)?,
        })
    }

    pub fn len(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len() / self.len().max(1)
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let l = self.n_tokens();
        Ok(Self {
            images: gather_rows(&self.images, rows)?,
            tokens: rows.iter().flat_map(|&r| self.tokens[r * l..(r + 1) * l].iter().copied()).collect(),
            theta: gather_rows(&self.theta, rows)?,
            beta: gather_rows(&self.beta, rows)?,
            joints3d: gather_rows(&self.joints3d, rows)?,
            joints2d: gather_rows(&self.joints2d, rows)?,
        })
    }
}

/// Negative log-likelihood of `targets` under `logits: [B, L, K]`, averaged
/// over every slot, or only over `masked` slots when given.
pub fn mask_loss<S: Real>(tape: &mut Tape<S>, logits: Var, targets: &[usize], masked: Option<&[bool]>) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather_last(logp, targets)?;
    let Some(masked) = masked else {
        let mean = tape.mean_all(picked);
        return Ok(tape.neg(mean));
    };
    if masked.len() != targets.len() {
        return Err(Error::Invalid(format!("{} mask flags for {} targets", masked.len(), targets.len())));
    }
    let count = masked.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(tape.scalar(S::zero()));
    }
    let w = S::lit(-1.0 / count as f64);
    let weights = Tensor::new(
        tape.shape(picked).to_vec(),
        masked.iter().map(|&m| if m { w } else { S::zero() }).collect(),
    )?;
    let weights = tape.constant(weights);
    let weighted = tape.mul(picked, weights)?;
    Ok(tape.sum_all(weighted))
}

/// Unweighted pose terms; each is a mean absolute error.
#[derive(Clone, Copy, Debug)]
pub struct PoseTerms {
    pub theta: Var,
    pub beta: Var,
    pub joints3d: Var,
    pub joints2d: Var,
}

/// Ground truth placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PoseTargetVars {
    pub theta: Var,
    pub beta: Var,
    pub joints3d: Var,
    pub joints2d: Var,
}

fn mean_abs_diff<S: Real>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean_all(d))
}

/// Decodes one-hot token choices `[B, L, K]` through the frozen tokenizer and
/// body model and compares pose, shape, 3D joints and normalised 2D joints.
#[allow(clippy::too_many_arguments)]
pub fn pose_terms<S: Real>(
    tape: &mut Tape<S>,
    tokenizer: &PoseTokenizer<S>,
    tok_params: &Bound,
    body: &BodyModel<S>,
    onehot: Var,
    beta_hat: Var,
    cam_hat: Var,
    target: &PoseTargetVars,
    image_size: usize,
) -> Result<PoseTerms> {
    let codebook = tape.constant(tokenizer.codebook.codes.clone());
    let codes = tape.matmul(onehot, codebook)?;
    let theta_hat = tokenizer.decode(tape, tok_params, codes)?;
    let mesh = body.forward(tape, theta_hat, beta_hat)?;
    let j2d = body.project(tape, mesh.joints, cam_hat)?;
    let theta = mean_abs_diff(tape, theta_hat, target.theta)?;
    let beta = mean_abs_diff(tape, beta_hat, target.beta)?;
    let joints3d = mean_abs_diff(tape, mesh.joints, target.joints3d)?;
    let pix = mean_abs_diff(tape, j2d, target.joints2d)?;
    let joints2d = tape.mul_scalar(pix, S::lit(1.0 / image_size as f64));
    Ok(PoseTerms {
        theta,
        beta,
        joints3d,
        joints2d,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stage2Components {
    pub total: f64,
    pub mask: f64,
    pub smpl: f64,
    pub joints3d: f64,
    pub joints2d: f64,
}

pub struct Stage2Loss {
    pub total: Var,
    pub components: Stage2Components,
}

/// Weighted sum of the token likelihood and pose terms.
pub fn total_loss<S: Real>(tape: &mut Tape<S>, mask: Var, terms: &PoseTerms, w: &Stage2Weights) -> Result<Stage2Loss> {
    let parts = [
        (mask, w.mask),
        (terms.theta, w.theta),
        (terms.beta, w.beta),
        (terms.joints3d, w.joints3d),
        (terms.joints2d, w.joints2d),
    ];
    let mut total = tape.scalar(S::zero());
    let mut vals = [0.0; 5];
    for (i, &(v, weight)) in parts.iter().enumerate() {
        let scaled = tape.mul_scalar(v, S::lit(weight));
        vals[i] = tape.value(scaled).item().to_f64().unwrap_or(f64::NAN);
        total = tape.add(total, scaled)?;
    }
    let components = Stage2Components {
        total: tape.value(total).item().to_f64().unwrap_or(f64::NAN),
        mask: vals[0],
        smpl: vals[1] + vals[2],
        joints3d: vals[3],
        joints2d: vals[4],
    };
    Ok(Stage2Loss { total, components })
}

/// Resumable stage-2 state. The tokenizer is only ever read.
#[derive(Clone, Debug)]
pub struct GenHmrTrainer<S> {
    pub model: MaskedTransformer<S>,
    pub optimizer: Adam<S>,
    pub step: usize,
}

impl<S: Real> GenHmrTrainer<S> {
    pub fn new(model: MaskedTransformer<S>, lr: f64) -> Self {
        let optimizer = Adam::new(&model.params, S::lit(lr));
        Self {
            model,
            optimizer,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stage2LogRow {
    pub step: usize,
    pub tau: f64,
    pub loss: f64,
    pub mask: f64,
    pub smpl: f64,
    pub joints3d: f64,
    pub joints2d: f64,
    /// Single-pass fully masked greedy token accuracy on the eval set.
    pub token_accuracy: f64,
}

/// Fraction of slots whose argmax from a fully masked input equals the
/// target token.
pub fn masked_token_accuracy<S: Real>(model: &MaskedTransformer<S>, data: &Stage2Data<S>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let (l, k) = (model.dims.n_tokens, model.dims.n_codes);
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0usize;
    for chunk in rows.chunks(64) {
        let b = data.select(chunk)?;
        let feats = model.feature_values(&b.images)?;
        let slots = vec![model.dims.mask_token(); chunk.len() * l];
        let logits = model.logits_values(&feats, &slots)?;
        hits += logits
            .data()
            .chunks(k)
            .zip(&b.tokens)
            .filter(|(row, &t)| argmax(row) == t)
            .count();
    }
    Ok(hits as f64 / (data.len() * l) as f64)
}

/// Runs up to `steps` updates; stops early once eval token accuracy reaches
/// `cfg.stop_token_accuracy` when that is positive.
pub fn train_genhmr<S: Real>(
    state: &mut GenHmrTrainer<S>,
    tokenizer: &PoseTokenizer<S>,
    body: &BodyModel<S>,
    train: &Stage2Data<S>,
    eval: &Stage2Data<S>,
    cfg: &Config,
    steps: usize,
) -> Result<Vec<Stage2LogRow>> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if train.n_tokens() != state.model.dims.n_tokens {
        return Err(Error::Invalid("token count differs between data and model".into()));
    }
    let weights = Stage2Weights::from_config(cfg);
    let anneal = AnnealSchedule {
        start: cfg.tau_start,
        end: cfg.tau_end,
        fraction: cfg.anneal_fraction,
        total_steps: cfg.steps,
    };
    let batch = cfg.batch.min(train.len()).max(1);
    let l = state.model.dims.n_tokens;
    let mask_token = state.model.dims.mask_token();
    let mut log = Vec::new();
    let end = state.step + steps;
    while state.step < end {
        let step = state.step;
        let mut batch_rng = step_stream(cfg.seed, Stream::Batches, step);
        let rows: Vec<usize> = (0..batch).map(|_| batch_rng.random_range(0..train.len())).collect();
        let b = train.select(&rows)?;
        let mut mask_rng = step_stream(cfg.seed, Stream::Masking, step);
        let mut slots = Vec::with_capacity(batch * l);
        let mut masked = Vec::with_capacity(batch * l);
        for seq in b.tokens.chunks(l) {
            let m = sample_mask(seq, mask_token, cfg.mask_max_ratio_time, &mut mask_rng);
            slots.extend(m.slots);
            masked.extend(m.masked);
        }
        let tau = anneal_tau(step, &anneal);
        let noise = gumbel_noise(
            &mut step_stream(cfg.seed, Stream::Gumbel, step),
            batch * l * state.model.dims.n_codes,
        );

        let model = &state.model;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let tp = tokenizer.params.bind(&mut tape, false);
        let images = tape.constant(b.images.clone());
        let feats = model.features(&mut tape, &p, images)?;
        let logits = model.logits(&mut tape, &p, &slots, &feats)?;
        let (beta_hat, cam_hat) = model.shape_camera(&mut tape, &p, &feats)?;
        let nll = mask_loss(&mut tape, logits, &b.tokens, cfg.masked_only_loss.then_some(&masked[..]))?;
        let (_, onehot) = gumbel_softmax(&mut tape, logits, &noise, tau)?;
        let target = PoseTargetVars {
            theta: tape.constant(b.theta.clone()),
            beta: tape.constant(b.beta.clone()),
            joints3d: tape.constant(b.joints3d.clone()),
            joints2d: tape.constant(b.joints2d.clone()),
        };
        let terms = pose_terms(
            &mut tape,
            tokenizer,
            &tp,
            body,
            onehot,
            beta_hat,
            cam_hat,
            &target,
            model.dims.image_size,
        )?;
        let loss = total_loss(&mut tape, nll, &terms, &weights)?;
        let c = loss.components;
        if !c.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("{c:?} tau {tau}"),
            });
        }
        tape.backward(loss.total)?;
        let grads = p.grads(&tape);
        state.optimizer.update(&mut state.model.params, &grads);
        state.step += 1;

        let report = (cfg.eval_every > 0 && state.step % cfg.eval_every == 0) || state.step == end;
        if report {
            let acc = masked_token_accuracy(&state.model, eval)?;
            log::info!(
                "model step {}: loss {:.5} mask {:.4} accuracy {:.3}",
                state.step,
                c.total,
                c.mask,
                acc
            );
            log.push(Stage2LogRow {
                step: state.step,
                tau,
                loss: c.total,
                mask: c.mask,
                smpl: c.smpl,
                joints3d: c.joints3d,
                joints2d: c.joints2d,
                token_accuracy: acc,
            });
            if cfg.stop_token_accuracy > 0.0 && acc >= cfg.stop_token_accuracy {
                break;
            }
        }
    }
    Ok(log)
}
