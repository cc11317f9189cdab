//! Differentiable parametric body: kinematic tree, skinning, projection.

pub mod rotation;
mod template;

use numcore::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use rotation::rodrigues;
pub use template::{make_synthetic_template, BodyTemplate};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 24;
pub const NUM_BETAS: usize = 10;

/// SMPL kinematic tree.
pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

/// Axis-angle rotations: global orientation first, then 23 local rotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub theta: Vec<[f64; 3]>,
}

impl PoseParams {
    pub fn zeros() -> Self {
        Self {
            theta: vec![[0.0; 3]; NUM_JOINTS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != NUM_JOINTS {
            return Err(Error::Invalid(format!(
                "pose needs {NUM_JOINTS} rotations, got {}",
                self.theta.len()
            )));
        }
        if self.theta.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("pose has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.theta.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f64]) -> Self {
        Self {
            theta: values.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub beta: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros() -> Self {
        Self {
            beta: vec![0.0; NUM_BETAS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != NUM_BETAS {
            return Err(Error::Invalid(format!(
                "shape needs {NUM_BETAS} coefficients, got {}",
                self.beta.len()
            )));
        }
        Ok(())
    }
}

/// Pinhole intrinsics with a fixed focal length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Focal 1000 px at 224 px, scaled with the image size; centred principal point.
    pub fn for_image(size: usize) -> Self {
        let s = size as f64;
        Self {
            focal: 1000.0 * s / 224.0,
            cx: s / 2.0,
            cy: s / 2.0,
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub translation: [f64; 3],
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub joints3d: Vec<[f64; 3]>,
}

/// Tape handles produced by [`forward_kinematics`].
#[derive(Clone, Copy, Debug)]
pub struct Kinematics {
    /// `[B, 24, 3, 3]` world rotations.
    pub rotations: Var,
    /// `[B, 24, 3]` world joint positions.
    pub joints: Var,
    /// `[B, 24, 3]` shaped rest joints.
    pub rest_joints: Var,
}

/// Tape handles of a skinned, batched mesh.
#[derive(Clone, Copy, Debug)]
pub struct SkinnedMesh {
    /// `[B, N_v, 3]`
    pub vertices: Var,
    /// `[B, k, 3]` regressed joints.
    pub joints: Var,
}

/// Composes joint transforms down the tree.
///
/// `theta: [B, 24, 3]`, `beta: [B, 10]`.
pub fn forward_kinematics<S: Real>(
    tape: &mut Tape<S>,
    tmpl: &BodyTemplate<S>,
    theta: Var,
    beta: Var,
) -> Result<Kinematics> {
    let b = tape.shape(theta)[0];
    let flat = tape.reshape(theta, &[b * NUM_JOINTS, 3])?;
    let local = rodrigues(tape, flat)?;
    let local = tape.reshape(local, &[b, NUM_JOINTS, 3, 3])?;

    let rest = shaped(tape, beta, &tmpl.joint_shape_basis, &tmpl.rest_joints)?;
    let parent_index: Vec<usize> = tmpl.parents.iter().map(|p| p.unwrap_or(0)).collect();
    let parent_pos = tape.index_select(rest, 1, &parent_index)?;
    let offsets = tape.sub(rest, parent_pos)?;

    let mut world_r: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    let mut world_t: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    for (i, parent) in tmpl.parents.iter().enumerate() {
        let r = tape.slice(local, 1, i, 1)?;
        let r = tape.reshape(r, &[b, 3, 3])?;
        match parent {
            None => {
                let t = tape.slice(rest, 1, i, 1)?;
                world_r.push(r);
                world_t.push(tape.reshape(t, &[b, 3])?);
            }
            Some(p) => {
                // t_i = J_i + (t_p − J_p) + (R_p − I)(J_i − J_p), exact at rest
                let off = tape.slice(offsets, 1, i, 1)?;
                let off = tape.reshape(off, &[b, 3])?;
                let off_col = tape.reshape(off, &[b, 3, 1])?;
                let rot = tape.matmul(world_r[*p], r)?;
                let moved = tape.matmul(world_r[*p], off_col)?;
                let moved = tape.reshape(moved, &[b, 3])?;
                let bend = tape.sub(moved, off)?;
                let rest_i = tape.slice(rest, 1, i, 1)?;
                let rest_i = tape.reshape(rest_i, &[b, 3])?;
                let rest_p = tape.slice(rest, 1, *p, 1)?;
                let rest_p = tape.reshape(rest_p, &[b, 3])?;
                let drift = tape.sub(world_t[*p], rest_p)?;
                let t = tape.add(rest_i, drift)?;
                world_r.push(rot);
                world_t.push(tape.add(t, bend)?);
            }
        }
    }
    let rs = world_r
        .iter()
        .map(|&r| tape.reshape(r, &[b, 1, 3, 3]))
        .collect::<numcore::Result<Vec<_>>>()?;
    let ts = world_t
        .iter()
        .map(|&t| tape.reshape(t, &[b, 1, 3]))
        .collect::<numcore::Result<Vec<_>>>()?;
    Ok(Kinematics {
        rotations: tape.concat(&rs, 1)?,
        joints: tape.concat(&ts, 1)?,
        rest_joints: rest,
    })
}

/// Linear blend skinning of the shaped rest mesh, then joint regression.
pub fn skin<S: Real>(
    tape: &mut Tape<S>,
    tmpl: &BodyTemplate<S>,
    kin: &Kinematics,
    beta: Var,
) -> Result<SkinnedMesh> {
    let b = tape.shape(beta)[0];
    let nv = tmpl.n_vertices();

    let rest = tape.reshape(kin.rest_joints, &[b, NUM_JOINTS, 3, 1])?;
    let rotated_rest = tape.matmul(kin.rotations, rest)?;
    let rotated_rest = tape.reshape(rotated_rest, &[b, NUM_JOINTS, 3])?;
    let trans = tape.sub(kin.joints, rotated_rest)?;
    let rot = tape.reshape(kin.rotations, &[b, NUM_JOINTS, 9])?;
    let affine = tape.concat(&[rot, trans], 2)?;
    let affine = tape.permute(affine, &[1, 0, 2])?;
    let affine = tape.reshape(affine, &[NUM_JOINTS, b * 12])?;

    let weights = tape.constant(tmpl.skin_weights.clone());
    let blended = tape.matmul(weights, affine)?;
    let blended = tape.reshape(blended, &[nv, b, 12])?;
    let blended = tape.permute(blended, &[1, 0, 2])?;
    let vr = tape.slice(blended, 2, 0, 9)?;
    let vr = tape.reshape(vr, &[b, nv, 3, 3])?;
    let vt = tape.slice(blended, 2, 9, 3)?;

    let verts = shaped(tape, beta, &tmpl.vertex_shape_basis, &tmpl.rest_vertices)?;
    let verts = tape.reshape(verts, &[b, nv, 3, 1])?;
    let posed = tape.matmul(vr, verts)?;
    let posed = tape.reshape(posed, &[b, nv, 3])?;
    let vertices = tape.add(posed, vt)?;

    let regressor = tape.constant(tmpl.joint_regressor.clone());
    let joints = regress_joints(tape, vertices, regressor)?;
    Ok(SkinnedMesh { vertices, joints })
}

/// `vertices: [B, N_v, 3]`, `regressor: [N_v, k]` → `[B, k, 3]`.
pub fn regress_joints<S: Real>(tape: &mut Tape<S>, vertices: Var, regressor: Var) -> Result<Var> {
    let shape = tape.shape(vertices).to_vec();
    let (b, nv) = (shape[0], shape[1]);
    let k = tape.shape(regressor)[1];
    let wt = tape.transpose(regressor)?;
    let v = tape.permute(vertices, &[1, 0, 2])?;
    let v = tape.reshape(v, &[nv, b * 3])?;
    let j = tape.matmul(wt, v)?;
    let j = tape.reshape(j, &[k, b, 3])?;
    Ok(tape.permute(j, &[1, 0, 2])?)
}

/// Perspective projection of `joints: [B, k, 3]` shifted by
/// `translation: [B, 3]`, giving pixels `[B, k, 2]`.
pub fn project<S: Real>(
    tape: &mut Tape<S>,
    joints: Var,
    translation: Var,
    intr: &Intrinsics,
) -> Result<Var> {
    let shape = tape.shape(joints).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let t = tape.reshape(translation, &[b, 1, 3])?;
    let cam = tape.add(joints, t)?;
    for (i, p) in tape.value(cam).data().chunks(3).enumerate() {
        let z = p[2];
        if !(z > S::zero()) {
            return Err(Error::NonPositiveDepth {
                joint: i % k,
                depth: z.to_f64_lossy(),
            });
        }
    }
    let xy = tape.slice(cam, 2, 0, 2)?;
    let z = tape.slice(cam, 2, 2, 1)?;
    let uv = tape.div(xy, z)?;
    let uv = tape.mul_scalar(uv, S::lit(intr.focal));
    let centre = tape.constant(Tensor::from_vec(vec![S::lit(intr.cx), S::lit(intr.cy)]));
    Ok(tape.add(uv, centre)?)
}

fn shaped<S: Real>(
    tape: &mut Tape<S>,
    beta: Var,
    basis: &Tensor<S>,
    rest: &Tensor<S>,
) -> Result<Var> {
    let b = tape.shape(beta)[0];
    let n = rest.shape()[0];
    let basis = tape.constant(basis.clone());
    let offsets = tape.matmul(beta, basis)?;
    let offsets = tape.reshape(offsets, &[b, n, 3])?;
    let rest = tape.constant(rest.clone());
    Ok(tape.add(offsets, rest)?)
}

/// Template plus camera intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyModel<S> {
    pub template: BodyTemplate<S>,
    pub intrinsics: Intrinsics,
}

impl<S: Real> BodyModel<S> {
    pub fn new(template: BodyTemplate<S>, intrinsics: Intrinsics) -> Self {
        Self {
            template,
            intrinsics,
        }
    }

    /// `theta: [B, 24, 3]`, `beta: [B, 10]`.
    pub fn forward(&self, tape: &mut Tape<S>, theta: Var, beta: Var) -> Result<SkinnedMesh> {
        let kin = forward_kinematics(tape, &self.template, theta, beta)?;
        skin(tape, &self.template, &kin, beta)
    }

    pub fn project(&self, tape: &mut Tape<S>, joints: Var, translation: Var) -> Result<Var> {
        project(tape, joints, translation, &self.intrinsics)
    }

    /// Batched evaluation without gradients: returns `(vertices, joints)`.
    pub fn evaluate(&self, theta: &Tensor<S>, beta: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut tape = Tape::new();
        let t = tape.constant(theta.clone());
        let b = tape.constant(beta.clone());
        let mesh = self.forward(&mut tape, t, b)?;
        Ok((tape.value(mesh.vertices).clone(), tape.value(mesh.joints).clone()))
    }

    pub fn mesh(&self, pose: &PoseParams, shape: &ShapeParams) -> Result<Mesh> {
        pose.validate()?;
        shape.validate()?;
        let theta = Tensor::new(
            vec![1, NUM_JOINTS, 3],
            pose.flat().into_iter().map(S::lit).collect(),
        )?;
        let beta = Tensor::new(vec![1, NUM_BETAS], shape.beta.iter().map(|&x| S::lit(x)).collect())?;
        let (v, j) = self.evaluate(&theta, &beta)?;
        Ok(Mesh {
            vertices: to_points(v.data()),
            joints3d: to_points(j.data()),
        })
    }

    /// Pixel coordinates of `joints3d` under `cam`.
    pub fn project_points(&self, joints3d: &[[f64; 3]], translation: [f64; 3]) -> Result<Vec<[f64; 2]>> {
        let mut tape = Tape::<S>::new();
        let k = joints3d.len();
        let j = tape.constant(Tensor::new(
            vec![1, k, 3],
            joints3d.iter().flatten().map(|&x| S::lit(x)).collect(),
        )?);
        let t = tape.constant(Tensor::new(vec![1, 3], translation.iter().map(|&x| S::lit(x)).collect())?);
        let uv = self.project(&mut tape, j, t)?;
        Ok(tape
            .value(uv)
            .data()
            .chunks(2)
            .map(|c| [c[0].to_f64_lossy(), c[1].to_f64_lossy()])
            .collect())
    }
}

pub(crate) fn to_points<S: Real>(data: &[S]) -> Vec<[f64; 3]> {
    data.chunks(3)
        .map(|c| [c[0].to_f64_lossy(), c[1].to_f64_lossy(), c[2].to_f64_lossy()])
        .collect()
}
