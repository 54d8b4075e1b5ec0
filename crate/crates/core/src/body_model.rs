//! Procedural SMPL-like body: linear shape blendshapes, forward kinematics
//! along the 24-joint tree, linear blend skinning, joint regression and the
//! weak-perspective camera.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rotations::{axis_angle_to_matrix, AxisAngle};

pub const NUM_JOINTS: usize = 24;
pub const NUM_BETAS: usize = 10;
pub const POSE_DIM: usize = NUM_JOINTS * 3;
/// Vertex count of the licensed SMPL mesh, kept for shape-compatibility runs.
pub const SMPL_VERTEX_COUNT: usize = 6890;
pub const DEFAULT_VERTEX_COUNT: usize = 200;

/// Standard SMPL kinematic tree; `-1` marks the root.
pub const SMPL_PARENTS: [i64; NUM_JOINTS] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

// T-pose skeleton, y up, +x is the body's left. Roughly 1.7 units tall.
const REST_SKELETON: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0],
    [-0.09, -0.08, 0.0],
    [0.0, 0.11, -0.02],
    [0.10, -0.48, 0.01],
    [-0.10, -0.48, 0.01],
    [0.0, 0.24, -0.01],
    [0.10, -0.88, -0.03],
    [-0.10, -0.88, -0.03],
    [0.0, 0.30, 0.0],
    [0.11, -0.94, 0.10],
    [-0.11, -0.94, 0.10],
    [0.0, 0.52, -0.01],
    [0.07, 0.43, -0.01],
    [-0.07, 0.43, -0.01],
    [0.0, 0.64, 0.03],
    [0.17, 0.46, -0.01],
    [-0.17, 0.46, -0.01],
    [0.42, 0.46, -0.02],
    [-0.42, 0.46, -0.02],
    [0.66, 0.46, 0.0],
    [-0.66, 0.46, 0.0],
    [0.75, 0.46, 0.0],
    [-0.75, 0.46, 0.0],
];

const HEAD_TOP: [f64; 3] = [0.0, 0.82, 0.03];

/// Axis-angle pose: block 0 is the global rotation, blocks 1..24 are
/// rotations relative to the parent joint.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams(Vec<f64>);

impl PoseParams {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.len() != POSE_DIM {
            return Err(Error::Shape(format!(
                "pose must have {POSE_DIM} entries, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("pose contains non-finite values".into()));
        }
        Ok(Self(theta))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; POSE_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn joint(&self, j: usize) -> AxisAngle {
        AxisAngle::new(self.0[3 * j], self.0[3 * j + 1], self.0[3 * j + 2])
    }

    pub fn rotation_matrices(&self) -> Vec<Matrix3<f64>> {
        (0..NUM_JOINTS)
            .map(|j| axis_angle_to_matrix(&self.joint(j)).0)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams(pub [f64; NUM_BETAS]);

impl ShapeParams {
    pub fn zeros() -> Self {
        Self([0.0; NUM_BETAS])
    }

    pub fn from_slice(beta: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_BETAS] = beta.try_into().map_err(|_| {
            Error::Shape(format!("shape must have {NUM_BETAS} entries, got {}", beta.len()))
        })?;
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("shape contains non-finite values".into()));
        }
        Ok(Self(arr))
    }

    /// Skips the finiteness check so graph ops propagate NaN like any other op.
    pub(crate) fn from_array_unchecked(arr: [f64; NUM_BETAS]) -> Self {
        Self(arr)
    }
}

/// Weak-perspective camera: scale and image-plane translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    pub s: f64,
    pub t: [f64; 2],
}

impl CameraParams {
    pub fn new(s: f64, t: [f64; 2]) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() || t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("invalid camera (s={s}, t={t:?})")));
        }
        Ok(Self { s, t })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshOutput {
    pub vertices: Vec<[f64; 3]>,
    /// Posed joint locations from forward kinematics.
    pub joints: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModelSpec {
    pub template: Vec<[f64; 3]>,
    /// `V × 3 × 10`, index `(v * 3 + c) * 10 + k`.
    pub shape_dirs: Vec<f64>,
    /// `V × 24`, row-stochastic.
    pub skin_weights: Vec<f64>,
    /// `24 × V`, row-stochastic.
    pub joint_regressor: Vec<f64>,
    pub parents: [i64; NUM_JOINTS],
}

/// Intermediate values kept for the backward pass of [`BodyModelSpec::forward_rotmats`].
#[derive(Debug, Clone)]
pub struct SkinCache {
    shaped: Vec<Vector3<f64>>,
    rest_joints: Vec<Vector3<f64>>,
    local_rot: Vec<Matrix3<f64>>,
    global_rot: Vec<Matrix3<f64>>,
}

fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let u = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * u)).norm()
}

/// Builds a deterministic humanoid body with `num_vertices` surface points
/// spread over 24 bone capsules.
pub fn build_mini_model(seed: u64, num_vertices: usize) -> Result<BodyModelSpec> {
    if num_vertices < NUM_JOINTS {
        return Err(Error::BodyModel(format!(
            "need at least {NUM_JOINTS} vertices, got {num_vertices}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joints: Vec<Vector3<f64>> = REST_SKELETON.iter().map(|p| Vector3::from(*p)).collect();

    // Capsules: one per non-root joint (parent → joint, driven by the parent)
    // plus a head capsule driven by the head joint.
    struct Capsule {
        a: Vector3<f64>,
        b: Vector3<f64>,
        radius: f64,
        joint: usize,
    }
    let mut capsules = Vec::with_capacity(NUM_JOINTS);
    for j in 1..NUM_JOINTS {
        let p = SMPL_PARENTS[j] as usize;
        let radius = match j {
            3 | 6 | 9 => 0.11,
            1 | 2 => 0.08,
            4 | 5 => 0.065,
            7 | 8 | 10 | 11 => 0.045,
            12 | 15 => 0.05,
            13 | 14 => 0.05,
            16 | 17 | 18 | 19 => 0.045,
            _ => 0.035,
        };
        capsules.push(Capsule { a: joints[p], b: joints[j], radius, joint: p });
    }
    capsules.push(Capsule {
        a: joints[15],
        b: Vector3::from(HEAD_TOP),
        radius: 0.09,
        joint: 15,
    });

    let n_caps = capsules.len();
    let mut template = Vec::with_capacity(num_vertices);
    for (c, cap) in capsules.iter().enumerate() {
        let count = num_vertices / n_caps + usize::from(c < num_vertices % n_caps);
        let axis = cap.b - cap.a;
        let dir = axis.normalize();
        let helper = if dir.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = dir.cross(&helper).normalize();
        let e2 = dir.cross(&e1);
        for i in 0..count {
            let u = (i as f64 + rng.random_range(0.2..0.8)) / count as f64;
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let p = cap.a + axis * u + (e1 * phi.cos() + e2 * phi.sin()) * cap.radius;
            template.push([p.x, p.y, p.z]);
        }
    }

    let mut skin_weights = vec![0.0; num_vertices * NUM_JOINTS];
    for (v, p) in template.iter().enumerate() {
        let p = Vector3::from(*p);
        let mut dists: Vec<(f64, usize)> = capsules
            .iter()
            .enumerate()
            .map(|(c, cap)| (point_segment_distance(&p, &cap.a, &cap.b), c))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0));
        let w0 = 1.0 / (dists[0].0 + 1e-3);
        let w1 = 1.0 / (dists[1].0 + 1e-3);
        let total = w0 + w1;
        skin_weights[v * NUM_JOINTS + capsules[dists[0].1].joint] += w0 / total;
        skin_weights[v * NUM_JOINTS + capsules[dists[1].1].joint] += w1 / total;
    }

    let k_nearest = 6.min(num_vertices);
    let mut joint_regressor = vec![0.0; NUM_JOINTS * num_vertices];
    for (j, jp) in joints.iter().enumerate() {
        let mut dists: Vec<(f64, usize)> = template
            .iter()
            .enumerate()
            .map(|(v, p)| ((Vector3::from(*p) - jp).norm(), v))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0));
        let ws: Vec<f64> = dists[..k_nearest].iter().map(|(d, _)| 1.0 / (d + 1e-3)).collect();
        let total: f64 = ws.iter().sum();
        for ((_, v), w) in dists[..k_nearest].iter().zip(&ws) {
            joint_regressor[j * num_vertices + v] = w / total;
        }
    }

    let field = Normal::new(0.0, 0.03).expect("valid std");
    let offset = Normal::new(0.0, 0.005).expect("valid std");
    let noise = Normal::new(0.0, 0.002).expect("valid std");
    let mut shape_dirs = vec![0.0; num_vertices * 3 * NUM_BETAS];
    for k in 0..NUM_BETAS {
        let a = Matrix3::from_fn(|_, _| field.sample(&mut rng));
        let c = Vector3::from_fn(|_, _| offset.sample(&mut rng));
        for (v, p) in template.iter().enumerate() {
            let d = a * Vector3::from(*p) + c;
            for axis in 0..3 {
                shape_dirs[(v * 3 + axis) * NUM_BETAS + k] = d[axis] + noise.sample(&mut rng);
            }
        }
    }

    let spec = BodyModelSpec {
        template,
        shape_dirs,
        skin_weights,
        joint_regressor,
        parents: SMPL_PARENTS,
    };
    spec.validate()?;
    Ok(spec)
}

impl BodyModelSpec {
    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.num_vertices();
        if v < NUM_JOINTS {
            return Err(Error::BodyModel(format!("vertex count {v} below {NUM_JOINTS}")));
        }
        if self.shape_dirs.len() != v * 3 * NUM_BETAS
            || self.skin_weights.len() != v * NUM_JOINTS
            || self.joint_regressor.len() != NUM_JOINTS * v
        {
            return Err(Error::BodyModel("array sizes inconsistent with vertex count".into()));
        }
        let stochastic = |rows: &mut dyn Iterator<Item = &[f64]>, what: &str| -> Result<()> {
            for (i, row) in rows.enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::BodyModel(format!("{what} row {i} not stochastic")));
                }
            }
            Ok(())
        };
        stochastic(&mut self.skin_weights.chunks(NUM_JOINTS), "skin weight")?;
        stochastic(&mut self.joint_regressor.chunks(v), "joint regressor")?;
        if self.parents[0] >= 0 {
            return Err(Error::BodyModel("joint 0 must be the root".into()));
        }
        for j in 1..NUM_JOINTS {
            let p = self.parents[j];
            // parent-before-child ordering rules out cycles and unreachable joints
            if p < 0 || p as usize >= j {
                return Err(Error::BodyModel(format!("joint {j} has invalid parent {p}")));
            }
        }
        Ok(())
    }

    /// `T(β) = template + shape_dirs · β`.
    pub fn shaped_template(&self, beta: &ShapeParams) -> Vec<Vector3<f64>> {
        self.template
            .iter()
            .enumerate()
            .map(|(v, p)| {
                let mut out = Vector3::from(*p);
                for axis in 0..3 {
                    let row = &self.shape_dirs[(v * 3 + axis) * NUM_BETAS..][..NUM_BETAS];
                    out[axis] += row.iter().zip(&beta.0).map(|(d, b)| d * b).sum::<f64>();
                }
                out
            })
            .collect()
    }

    fn regress(&self, vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let v = self.num_vertices();
        (0..NUM_JOINTS)
            .map(|j| {
                let row = &self.joint_regressor[j * v..(j + 1) * v];
                row.iter()
                    .zip(vertices)
                    .filter(|(w, _)| **w != 0.0)
                    .fold(Vector3::zeros(), |acc, (w, p)| acc + p * *w)
            })
            .collect()
    }

    /// `J₃d = W · vertices`.
    pub fn regress_joints(&self, vertices: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        if vertices.len() != self.num_vertices() {
            return Err(Error::Shape(format!(
                "expected {} vertices, got {}",
                self.num_vertices(),
                vertices.len()
            )));
        }
        let verts: Vec<Vector3<f64>> = vertices.iter().map(|p| Vector3::from(*p)).collect();
        Ok(self.regress(&verts).iter().map(|p| [p.x, p.y, p.z]).collect())
    }

    pub fn forward(&self, theta: &PoseParams, beta: &ShapeParams) -> MeshOutput {
        self.forward_rotmats(&theta.rotation_matrices(), beta).0
    }

    /// Forward pass from per-joint local rotation matrices.
    pub fn forward_rotmats(
        &self,
        rotations: &[Matrix3<f64>],
        beta: &ShapeParams,
    ) -> (MeshOutput, SkinCache) {
        debug_assert_eq!(rotations.len(), NUM_JOINTS);
        let shaped = self.shaped_template(beta);
        let rest_joints = self.regress(&shaped);

        let mut global_rot = vec![Matrix3::identity(); NUM_JOINTS];
        let mut global_t = vec![Vector3::zeros(); NUM_JOINTS];
        global_rot[0] = rotations[0];
        global_t[0] = rest_joints[0];
        for j in 1..NUM_JOINTS {
            let p = self.parents[j] as usize;
            let offset = rest_joints[j] - rest_joints[p];
            global_rot[j] = global_rot[p] * rotations[j];
            global_t[j] = global_rot[p] * offset + global_t[p];
        }

        // Skinning transforms: v ↦ A_j v + b_j with b_j = t_j − A_j J̄_j.
        let skin_t: Vec<Vector3<f64>> = (0..NUM_JOINTS)
            .map(|j| global_t[j] - global_rot[j] * rest_joints[j])
            .collect();
        let vertices = shaped
            .iter()
            .enumerate()
            .map(|(v, p)| {
                let weights = &self.skin_weights[v * NUM_JOINTS..(v + 1) * NUM_JOINTS];
                let mut out = Vector3::zeros();
                for (j, w) in weights.iter().enumerate() {
                    if *w != 0.0 {
                        out += (global_rot[j] * p + skin_t[j]) * *w;
                    }
                }
                [out.x, out.y, out.z]
            })
            .collect();
        let joints = global_t.iter().map(|t| [t.x, t.y, t.z]).collect();

        let cache = SkinCache {
            shaped,
            rest_joints,
            local_rot: rotations.to_vec(),
            global_rot,
        };
        (MeshOutput { vertices, joints }, cache)
    }

    /// Reverse-mode pass of [`Self::forward_rotmats`]. Takes the upstream
    /// gradients of vertices (`V × 3`) and posed joints (`24 × 3`), returns
    /// gradients w.r.t. the 24 local rotation matrices (row-major) and β.
    pub fn backward_rotmats(
        &self,
        cache: &SkinCache,
        d_vertices: &[[f64; 3]],
        d_joints: &[[f64; 3]],
    ) -> (Vec<[f64; 9]>, [f64; NUM_BETAS]) {
        let nv = self.num_vertices();
        let mut d_rot_g = vec![Matrix3::<f64>::zeros(); NUM_JOINTS];
        let mut d_t_g: Vec<Vector3<f64>> =
            d_joints.iter().map(|d| Vector3::from(*d)).collect();
        let mut d_skin_t = vec![Vector3::<f64>::zeros(); NUM_JOINTS];
        let mut d_shaped = vec![Vector3::<f64>::zeros(); nv];

        for v in 0..nv {
            let dv = Vector3::from(d_vertices[v]);
            if dv == Vector3::zeros() {
                continue;
            }
            let p = &cache.shaped[v];
            let weights = &self.skin_weights[v * NUM_JOINTS..(v + 1) * NUM_JOINTS];
            let mut acc = Vector3::zeros();
            for (j, w) in weights.iter().enumerate() {
                if *w != 0.0 {
                    let wdv = dv * *w;
                    d_rot_g[j] += wdv * p.transpose();
                    d_skin_t[j] += wdv;
                    acc += cache.global_rot[j].transpose() * wdv;
                }
            }
            d_shaped[v] += acc;
        }

        let mut d_rest = vec![Vector3::<f64>::zeros(); NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            d_t_g[j] += d_skin_t[j];
            d_rot_g[j] -= d_skin_t[j] * cache.rest_joints[j].transpose();
            d_rest[j] -= cache.global_rot[j].transpose() * d_skin_t[j];
        }

        let mut d_local = vec![Matrix3::<f64>::zeros(); NUM_JOINTS];
        for j in (1..NUM_JOINTS).rev() {
            let p = self.parents[j] as usize;
            let offset = cache.rest_joints[j] - cache.rest_joints[p];
            let rp = cache.global_rot[p];
            let (drg, dtg) = (d_rot_g[j], d_t_g[j]);
            d_local[j] = rp.transpose() * drg;
            d_rot_g[p] += drg * cache.local_rot[j].transpose() + dtg * offset.transpose();
            let d_offset = rp.transpose() * dtg;
            d_rest[j] += d_offset;
            d_rest[p] -= d_offset;
            d_t_g[p] += dtg;
        }
        d_local[0] = d_rot_g[0];
        d_rest[0] += d_t_g[0];

        for (j, dr) in d_rest.iter().enumerate() {
            let row = &self.joint_regressor[j * nv..(j + 1) * nv];
            for (v, w) in row.iter().enumerate() {
                if *w != 0.0 {
                    d_shaped[v] += dr * *w;
                }
            }
        }

        let mut d_beta = [0.0; NUM_BETAS];
        for (v, ds) in d_shaped.iter().enumerate() {
            for axis in 0..3 {
                let row = &self.shape_dirs[(v * 3 + axis) * NUM_BETAS..][..NUM_BETAS];
                for (db, d) in d_beta.iter_mut().zip(row) {
                    *db += d * ds[axis];
                }
            }
        }

        let d_rot = d_local
            .iter()
            .map(|m| {
                [
                    m[(0, 0)],
                    m[(0, 1)],
                    m[(0, 2)],
                    m[(1, 0)],
                    m[(1, 1)],
                    m[(1, 2)],
                    m[(2, 0)],
                    m[(2, 1)],
                    m[(2, 2)],
                ]
            })
            .collect();
        (d_rot, d_beta)
    }

    /// Rest joints `J̄ = W · T(β)`.
    pub fn rest_joints(&self, beta: &ShapeParams) -> Vec<[f64; 3]> {
        self.regress(&self.shaped_template(beta))
            .iter()
            .map(|p| [p.x, p.y, p.z])
            .collect()
    }
}

/// Weak-perspective projection: drop depth, scale, translate.
pub fn project(j3d: &[[f64; 3]], cam: &CameraParams) -> Vec<[f64; 2]> {
    j3d.iter()
        .map(|p| [cam.s * p[0] + cam.t[0], cam.s * p[1] + cam.t[1]])
        .collect()
}

/// Sample a standard-normal shape vector scaled by `sigma`.
pub fn random_shape<R: Rng>(rng: &mut R, sigma: f64) -> ShapeParams {
    let n = Normal::new(0.0, sigma).expect("valid std");
    ShapeParams(std::array::from_fn(|_| n.sample(rng)))
}
