//! Deterministic synthetic body template with SMPL-like structure.

use numcore::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NUM_BETAS, NUM_JOINTS, PARENTS};
use crate::error::{Error, Result};

/// Approximate SMPL rest joints in meters; y points down so an upright body
/// projects upright in image coordinates.
const REST_JOINTS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.06, 0.09, 0.0],
    [-0.06, 0.09, 0.0],
    [0.0, -0.11, -0.01],
    [0.10, 0.47, 0.0],
    [-0.10, 0.47, 0.0],
    [0.0, -0.24, 0.01],
    [0.09, 0.87, -0.04],
    [-0.09, 0.87, -0.04],
    [0.0, -0.30, 0.02],
    [0.11, 0.93, 0.08],
    [-0.11, 0.93, 0.08],
    [0.0, -0.51, -0.01],
    [0.08, -0.42, 0.0],
    [-0.08, -0.42, 0.0],
    [0.0, -0.58, 0.04],
    [0.19, -0.45, -0.01],
    [-0.19, -0.45, -0.01],
    [0.45, -0.43, -0.03],
    [-0.45, -0.43, -0.03],
    [0.71, -0.44, -0.03],
    [-0.71, -0.44, -0.03],
    [0.80, -0.43, -0.04],
    [-0.80, -0.43, -0.04],
];

/// Per-unit-β displacement bound for joints, in meters.
const SHAPE_SCALE: f64 = 0.05;
const PAIR_SHAPE_SCALE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct BodyTemplate<S> {
    pub parents: Vec<Option<usize>>,
    /// `[24, 3]`
    pub rest_joints: Tensor<S>,
    /// `[N_v, 3]`
    pub rest_vertices: Tensor<S>,
    /// `[N_v, 24]`, rows sum to one.
    pub skin_weights: Tensor<S>,
    /// `[N_v, k]`, columns sum to one.
    pub joint_regressor: Tensor<S>,
    /// `[10, 24·3]` joint offsets per unit β.
    pub joint_shape_basis: Tensor<S>,
    /// `[10, N_v·3]` vertex offsets per unit β.
    pub vertex_shape_basis: Tensor<S>,
}

impl<S: Real> BodyTemplate<S> {
    pub fn n_vertices(&self) -> usize {
        self.rest_vertices.shape()[0]
    }

    pub fn n_regressed(&self) -> usize {
        self.joint_regressor.shape()[1]
    }

    pub fn cast<T: Real>(&self) -> BodyTemplate<T> {
        BodyTemplate {
            parents: self.parents.clone(),
            rest_joints: self.rest_joints.cast(),
            rest_vertices: self.rest_vertices.cast(),
            skin_weights: self.skin_weights.cast(),
            joint_regressor: self.joint_regressor.cast(),
            joint_shape_basis: self.joint_shape_basis.cast(),
            vertex_shape_basis: self.vertex_shape_basis.cast(),
        }
    }

    /// Checks tree order, nonnegativity and row/column normalization.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.parents.len() != NUM_JOINTS || self.parents[0].is_some() {
            return Err(Error::Invalid("parent list must have 24 entries rooted at 0".into()));
        }
        for (i, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => return Err(Error::Invalid(format!("joint {i} has invalid parent {p:?}"))),
            }
        }
        let nv = self.n_vertices();
        for v in 0..nv {
            let row = &self.skin_weights.data()[v * NUM_JOINTS..(v + 1) * NUM_JOINTS];
            if row.iter().any(|w| *w < S::zero()) {
                return Err(Error::Invalid(format!("negative skin weight at vertex {v}")));
            }
            let sum: f64 = row.iter().map(|w| w.to_f64_lossy()).sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::Invalid(format!("skin weights of vertex {v} sum to {sum}")));
            }
        }
        let k = self.n_regressed();
        for j in 0..k {
            let mut sum = 0.0;
            for v in 0..nv {
                let w = self.joint_regressor.data()[v * k + j];
                if w < S::zero() {
                    return Err(Error::Invalid(format!("negative regressor weight ({v}, {j})")));
                }
                sum += w.to_f64_lossy();
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::Invalid(format!("regressor column {j} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Builds a template with `n_vertices` vertices grouped around the joints.
///
/// Vertices come in pairs mirrored about their owning joint, so the uniform
/// regressor over a joint's vertices reproduces the shaped rest joint exactly.
pub fn make_synthetic_template(n_vertices: usize, seed: u64) -> Result<BodyTemplate<f64>> {
    if n_vertices < NUM_JOINTS {
        return Err(Error::Invalid(format!(
            "need at least {NUM_JOINTS} vertices, got {n_vertices}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss3 = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [0, 1, 2].map(|_| StandardNormal.sample(rng))
    };

    let owner = |v: usize| v % NUM_JOINTS;
    let members: Vec<Vec<usize>> = (0..NUM_JOINTS)
        .map(|j| (0..n_vertices).filter(|&v| owner(v) == j).collect())
        .collect();

    // joint shape basis: root fixed, every β row scaled to a 5 cm maximum
    let mut joint_basis = vec![[0.0f64; 3]; NUM_BETAS * NUM_JOINTS];
    for b in 0..NUM_BETAS {
        let row = &mut joint_basis[b * NUM_JOINTS..(b + 1) * NUM_JOINTS];
        for d in row.iter_mut().skip(1) {
            *d = gauss3(&mut rng);
        }
        let max = row.iter().map(|d| norm(*d)).fold(0.0, f64::max);
        for d in row.iter_mut() {
            *d = d.map(|x| x * SHAPE_SCALE / max);
        }
    }

    let mut rest_vertices = vec![[0.0f64; 3]; n_vertices];
    let mut vertex_basis = vec![[0.0f64; 3]; NUM_BETAS * n_vertices];
    let mut skin = vec![0.0f64; n_vertices * NUM_JOINTS];
    for (j, verts) in members.iter().enumerate() {
        let centre = REST_JOINTS[j];
        for pair in verts.chunks(2) {
            let dir = gauss3(&mut rng);
            let radius = rng.random_range(0.03..0.08);
            let offset = dir.map(|x| x * radius / norm(dir));
            let pair_basis: Vec<[f64; 3]> = (0..NUM_BETAS)
                .map(|_| gauss3(&mut rng).map(|x| x * PAIR_SHAPE_SCALE))
                .collect();
            let signs: &[f64] = if pair.len() == 2 { &[1.0, -1.0] } else { &[0.0] };
            for (&v, &sign) in pair.iter().zip(signs) {
                let own = if j == 0 { 1.0 } else { rng.random_range(0.55..1.0) };
                rest_vertices[v] = [0, 1, 2].map(|i| centre[i] + sign * offset[i]);
                for b in 0..NUM_BETAS {
                    let base = joint_basis[b * NUM_JOINTS + j];
                    vertex_basis[b * n_vertices + v] =
                        [0, 1, 2].map(|i| base[i] + sign * pair_basis[b][i]);
                }
                skin[v * NUM_JOINTS + j] = own;
                if let Some(p) = PARENTS[j] {
                    skin[v * NUM_JOINTS + p] = 1.0 - own;
                }
            }
        }
    }

    let mut regressor = vec![0.0f64; n_vertices * NUM_JOINTS];
    for (j, verts) in members.iter().enumerate() {
        for &v in verts {
            regressor[v * NUM_JOINTS + j] = 1.0 / verts.len() as f64;
        }
    }

    let flat = |rows: &[[f64; 3]]| rows.iter().flatten().copied().collect::<Vec<f64>>();
    Ok(BodyTemplate {
        parents: PARENTS.to_vec(),
        rest_joints: Tensor::new(vec![NUM_JOINTS, 3], flat(&REST_JOINTS))?,
        rest_vertices: Tensor::new(vec![n_vertices, 3], flat(&rest_vertices))?,
        skin_weights: Tensor::new(vec![n_vertices, NUM_JOINTS], skin)?,
        joint_regressor: Tensor::new(vec![n_vertices, NUM_JOINTS], regressor)?,
        joint_shape_basis: Tensor::new(vec![NUM_BETAS, NUM_JOINTS * 3], flat(&joint_basis))?,
        vertex_shape_basis: Tensor::new(vec![NUM_BETAS, n_vertices * 3], flat(&vertex_basis))?,
    })
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(
            make_synthetic_template(128, 3).unwrap(),
            make_synthetic_template(128, 3).unwrap()
        );
        assert_ne!(
            make_synthetic_template(128, 3).unwrap(),
            make_synthetic_template(128, 4).unwrap()
        );
    }

    #[test]
    fn invariants_hold() {
        for n in [24, 25, 128, 301] {
            let t = make_synthetic_template(n, 0).unwrap();
            t.validate(1e-12).unwrap();
        }
    }

    #[test]
    fn too_few_vertices() {
        assert!(make_synthetic_template(23, 0).is_err());
    }

    #[test]
    fn root_shape_offset_is_zero() {
        let t = make_synthetic_template(128, 0).unwrap();
        for b in 0..NUM_BETAS {
            assert!(t.joint_shape_basis.data()[b * 72..b * 72 + 3].iter().all(|x| *x == 0.0));
        }
    }
}
