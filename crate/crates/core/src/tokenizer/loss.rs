use numcore::{Real, Tape, Var};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqWeights {
    pub recon: f64,
    pub embed: f64,
    pub commit: f64,
    pub rot: f64,
    pub vertices: f64,
    pub joints: f64,
}

impl VqWeights {
    pub fn from_config(cfg: &crate::config::Config) -> Self {
        Self {
            recon: cfg.lambda_re,
            embed: cfg.lambda_embed,
            commit: cfg.lambda_commit,
            rot: cfg.lambda_rot,
            vertices: cfg.lambda_vertices,
            joints: cfg.lambda_joints,
        }
    }
}

/// Tape nodes for one tokenizer forward pass.
#[derive(Clone, Copy, Debug)]
pub struct VqInputs {
    pub theta: Var,
    pub theta_hat: Var,
    /// encoder output
    pub latents: Var,
    /// selected code vectors, same shape as `latents`
    pub codes: Var,
    pub vertices: Var,
    pub vertices_hat: Var,
    pub joints: Var,
    pub joints_hat: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VqComponents {
    pub total: f64,
    pub recon: f64,
    pub rot: f64,
    pub vertices: f64,
    pub joints: f64,
    pub embed: f64,
    pub commit: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct VqLoss {
    pub total: Var,
    pub components: VqComponents,
}

fn mean_abs_diff<S: Real>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean_all(d))
}

fn mean_sq_diff<S: Real>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.square(d);
    Ok(tape.mean_all(d))
}

/// Weighted L1 reconstruction plus squared-distance embedding and
/// commitment terms with the usual stop-gradients.
pub fn vq_loss<S: Real>(tape: &mut Tape<S>, x: &VqInputs, w: &VqWeights) -> Result<VqLoss> {
    let rot = mean_abs_diff(tape, x.theta_hat, x.theta)?;
    let vertices = mean_abs_diff(tape, x.vertices_hat, x.vertices)?;
    let joints = mean_abs_diff(tape, x.joints_hat, x.joints)?;
    let r1 = tape.mul_scalar(rot, S::lit(w.rot));
    let r2 = tape.mul_scalar(vertices, S::lit(w.vertices));
    let r3 = tape.mul_scalar(joints, S::lit(w.joints));
    let recon = tape.add(r1, r2)?;
    let recon = tape.add(recon, r3)?;

    let z_fixed = tape.detach(x.latents);
    let c_fixed = tape.detach(x.codes);
    let embed = mean_sq_diff(tape, z_fixed, x.codes)?;
    let commit = mean_sq_diff(tape, x.latents, c_fixed)?;

    let t1 = tape.mul_scalar(recon, S::lit(w.recon));
    let t2 = tape.mul_scalar(embed, S::lit(w.embed));
    let t3 = tape.mul_scalar(commit, S::lit(w.commit));
    let total = tape.add(t1, t2)?;
    let total = tape.add(total, t3)?;

    let v = |tape: &Tape<S>, n: Var| tape.value(n).item().to_f64_lossy();
    Ok(VqLoss {
        total,
        components: VqComponents {
            total: v(tape, total),
            recon: v(tape, recon),
            rot: v(tape, rot),
            vertices: v(tape, vertices),
            joints: v(tape, joints),
            embed: v(tape, embed),
            commit: v(tape, commit),
        },
    })
}
