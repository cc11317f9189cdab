//! Tokenizer training.

use numcore::{Real, Tape, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use super::data::Dataset;
use crate::body::{to_points, BodyModel};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::{mpjpe, mve};
use crate::optim::Adam;
use crate::rng::{step_stream, Stream};
use crate::tokenizer::{dead_fraction, vq_loss, Codebook, PoseTokenizer, VqComponents, VqInputs, VqWeights};

/// Poses with their ground-truth meshes, stacked for batching.
#[derive(Clone, Debug)]
pub struct PoseTargets<S> {
    pub theta: Tensor<S>,
    pub beta: Tensor<S>,
    pub vertices: Tensor<S>,
    pub joints: Tensor<S>,
}

fn gather_rows<S: Real>(t: &Tensor<S>, rows: &[usize]) -> Result<Tensor<S>> {
    let n = t.shape()[0];
    let width = t.numel() / n.max(1);
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Ok(Tensor::new(shape, data)?)
}

impl<S: Real> PoseTargets<S> {
    pub fn build(data: &Dataset, body: &BodyModel<S>) -> Result<Self> {
        let all: Vec<usize> = (0..data.len()).collect();
        let (theta, beta) = data.pose_batch::<S>(&all)?;
        let mut verts = Vec::new();
        let mut joints = Vec::new();
        for chunk in all.chunks(256) {
            let (t, b) = data.pose_batch::<S>(chunk)?;
            let (v, j) = body.evaluate(&t, &b)?;
            verts.extend_from_slice(v.data());
            joints.extend_from_slice(j.data());
        }
        let nv = body.template.n_vertices();
        let k = body.template.n_regressed();
        Ok(Self {
            theta,
            beta,
            vertices: Tensor::new(vec![data.len(), nv, 3], verts)?,
            joints: Tensor::new(vec![data.len(), k, 3], joints)?,
        })
    }

    pub fn len(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Result<PoseTargets<S>> {
        Ok(Self {
            theta: gather_rows(&self.theta, rows)?,
            beta: gather_rows(&self.beta, rows)?,
            vertices: gather_rows(&self.vertices, rows)?,
            joints: gather_rows(&self.joints, rows)?,
        })
    }
}

/// Resumable stage-1 state.
#[derive(Clone, Debug)]
pub struct TokenizerTrainer<S> {
    pub tokenizer: PoseTokenizer<S>,
    pub optimizer: Adam<S>,
    pub step: usize,
}

impl<S: Real> TokenizerTrainer<S> {
    pub fn new(tokenizer: PoseTokenizer<S>, lr: f64) -> Self {
        let optimizer = Adam::new(&tokenizer.params, S::lit(lr));
        Self {
            tokenizer,
            optimizer,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TokenizerEval {
    pub mpjpe_mm: f64,
    pub mve_mm: f64,
    pub dead_fraction: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TokenizerLogRow {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub rot: f64,
    pub vertices: f64,
    pub joints: f64,
    pub embed: f64,
    pub commit: f64,
    pub resets: usize,
    pub mpjpe_mm: f64,
    pub mve_mm: f64,
    pub dead_fraction: f64,
}

/// Reconstruction error through quantization on `targets`.
pub fn evaluate_tokenizer<S: Real>(
    tok: &PoseTokenizer<S>,
    body: &BodyModel<S>,
    targets: &PoseTargets<S>,
) -> Result<TokenizerEval> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let mut tokens = Vec::new();
    let (mut joint_err, mut vert_err) = (0.0, 0.0);
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(256) {
        let t = targets.select(chunk)?;
        let ids = tok.tokenize(&t.theta)?;
        let theta_hat = tok.decode_tokens(&ids)?;
        tokens.extend(ids);
        let (v, j) = body.evaluate(&theta_hat, &t.beta)?;
        let (vp, jp) = (to_points(v.data()), to_points(j.data()));
        let (vg, jg) = (to_points(t.vertices.data()), to_points(t.joints.data()));
        let (nv, k) = (vp.len() / chunk.len(), jp.len() / chunk.len());
        for i in 0..chunk.len() {
            joint_err += mpjpe(&jp[i * k..(i + 1) * k], &jg[i * k..(i + 1) * k])?;
            vert_err += mve(&vp[i * nv..(i + 1) * nv], &vg[i * nv..(i + 1) * nv])?;
        }
    }
    Ok(TokenizerEval {
        mpjpe_mm: joint_err / n as f64,
        mve_mm: vert_err / n as f64,
        dead_fraction: dead_fraction(&tokens, tok.dims.n_codes),
    })
}

/// Runs `steps` optimizer steps, evaluating on `eval` every
/// `cfg.eval_every` steps and after the last one.
pub fn train_tokenizer<S: Real>(
    state: &mut TokenizerTrainer<S>,
    body: &BodyModel<S>,
    train: &PoseTargets<S>,
    eval: &PoseTargets<S>,
    cfg: &Config,
    steps: usize,
) -> Result<Vec<TokenizerLogRow>> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let weights = VqWeights::from_config(cfg);
    let decay = S::lit(cfg.ema_decay);
    let batch = cfg.tokenizer_batch.min(train.len()).max(1);
    let mut log = Vec::new();
    let mut resets = 0;
    let end = state.step + steps;
    while state.step < end {
        let step = state.step;
        let mut batch_rng = step_stream(cfg.seed, Stream::Batches, step);
        let rows: Vec<usize> = (0..batch).map(|_| batch_rng.random_range(0..train.len())).collect();
        let b = train.select(&rows)?;

        let tok = &mut state.tokenizer;
        if step == 0 {
            seed_codebook(tok, &b.theta, cfg.seed)?;
        }
        let mut tape = Tape::new();
        let p = tok.params.bind(&mut tape, true);
        let theta = tape.constant(b.theta.clone());
        let beta = tape.constant(b.beta.clone());
        let z = tok.encode(&mut tape, &p, theta)?;
        let (tokens, codes, z_st) = tok.quantize(&mut tape, z)?;
        let theta_hat = tok.decode(&mut tape, &p, z_st)?;
        let mesh = body.forward(&mut tape, theta_hat, beta)?;
        let vertices = tape.constant(b.vertices.clone());
        let joints = tape.constant(b.joints.clone());
        let loss = vq_loss(
            &mut tape,
            &VqInputs {
                theta,
                theta_hat,
                latents: z,
                codes,
                vertices,
                vertices_hat: mesh.vertices,
                joints,
                joints_hat: mesh.joints,
            },
            &weights,
        )?;
        let c = loss.components;
        if !c.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("{c:?}"),
            });
        }
        tape.backward(loss.total)?;
        let grads = p.grads(&tape);
        state.optimizer.update(&mut tok.params, &grads);

        let latents = tape.value(z).data().to_vec();
        tok.codebook.ema_update(&latents, &tokens, decay);
        let window_closed = cfg.reset_every > 0 && (step + 1) % cfg.reset_every == 0;
        if window_closed {
            if cfg.codebook_reset {
                let mut reset_rng = step_stream(cfg.seed, Stream::Reset, step);
                resets += tok.codebook.reset_dead(&latents, cfg.reset_threshold, &mut reset_rng);
            } else {
                tok.codebook.usage.iter_mut().for_each(|u| *u = 0);
            }
        }
        state.step += 1;

        let report = (cfg.eval_every > 0 && state.step % cfg.eval_every == 0) || state.step == end;
        if report {
            let e = if eval.is_empty() {
                TokenizerEval::default()
            } else {
                evaluate_tokenizer(tok, body, eval)?
            };
            log::info!(
                "tokenizer step {}: loss {:.5} mpjpe {:.2} mm dead {:.3}",
                state.step,
                c.total,
                e.mpjpe_mm,
                e.dead_fraction
            );
            log.push(row(state.step, &c, resets, &e));
            resets = 0;
        }
    }
    Ok(log)
}

fn row(step: usize, c: &VqComponents, resets: usize, e: &TokenizerEval) -> TokenizerLogRow {
    TokenizerLogRow {
        step,
        loss: c.total,
        recon: c.recon,
        rot: c.rot,
        vertices: c.vertices,
        joints: c.joints,
        embed: c.embed,
        commit: c.commit,
        resets,
        mpjpe_mm: e.mpjpe_mm,
        mve_mm: e.mve_mm,
        dead_fraction: e.dead_fraction,
    }
}

/// Initializes code vectors from distinct latents of a first batch.
fn seed_codebook<S: Real>(tok: &mut PoseTokenizer<S>, theta: &Tensor<S>, seed: u64) -> Result<()> {
    let z = tok.encode_values(theta)?;
    let d = tok.dims.code_dim;
    let n = z.numel() / d;
    let k = tok.dims.n_codes;
    let mut rng = step_stream(seed, Stream::Init, 0);
    let rows: Vec<usize> = if n >= k {
        sample(&mut rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    };
    let mut codes = Vec::with_capacity(k * d);
    for r in rows {
        codes.extend_from_slice(&z.data()[r * d..(r + 1) * d]);
    }
    tok.codebook = Codebook::from_codes(Tensor::new(vec![k, d], codes)?);
    Ok(())
}
