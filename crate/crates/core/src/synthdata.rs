//! Deterministic synthetic motion, a cheap heatmap renderer and dataset
//! assembly with full SMPL, 3D and 2D labels.

use std::f64::consts::{FRAC_PI_3, FRAC_PI_4, TAU};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::body_model::{
    project, random_shape, BodyModelSpec, CameraParams, PoseParams, ShapeParams, NUM_JOINTS, POSE_DIM,
};
use crate::error::{Error, Result};
use crate::losses::{GroundTruth, SupervisionFlags};
use crate::metrics::Frame;
use crate::rotations::{axis_angle_to_matrix, matrix_to_axis_angle, AxisAngle, RotMat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    /// Upper bound on any joint's amplitude, radians.
    pub max_amplitude: f64,
    /// Fraction of `max_amplitude` allowed for the root sway.
    pub root_fraction: f64,
    /// Cycles per frame.
    pub freq_range: [f64; 2],
    pub max_base_yaw: f64,
    /// Radians per frame.
    pub max_yaw_drift: f64,
    pub scale_range: [f64; 2],
    pub scale_wobble: f64,
    pub max_translation: f64,
    pub translation_wobble: f64,
    pub beta_sigma: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            max_amplitude: FRAC_PI_3,
            root_fraction: 0.3,
            freq_range: [0.05, 0.15],
            max_base_yaw: FRAC_PI_4,
            max_yaw_drift: 0.01,
            scale_range: [0.8, 1.0],
            scale_wobble: 0.03,
            max_translation: 0.05,
            translation_wobble: 0.02,
            beta_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointMotion {
    pub axis: [f64; 3],
    pub amplitude: f64,
    pub freq: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraTrajectory {
    pub s0: f64,
    pub s_amp: f64,
    pub t0: [f64; 2],
    pub t_amp: [f64; 2],
    pub freq: f64,
    pub phase: f64,
}

impl CameraTrajectory {
    pub fn at(&self, t: f64) -> CameraParams {
        let w = (TAU * self.freq * t + self.phase).sin();
        CameraParams {
            s: self.s0 + self.s_amp * w,
            t: [self.t0[0] + self.t_amp[0] * w, self.t0[1] + self.t_amp[1] * w],
        }
    }
}

/// Per-joint sinusoids, a global yaw drift, and a camera path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub joints: Vec<JointMotion>,
    pub base_yaw: f64,
    pub yaw_drift: f64,
    pub camera: CameraTrajectory,
}

impl MotionSpec {
    pub fn random<R: Rng>(rng: &mut R, cfg: &MotionConfig) -> Self {
        let joint = |limit: f64, rng: &mut R| {
            let axis: [f64; 3] = UnitSphere.sample(rng);
            JointMotion {
                axis,
                amplitude: if limit > 0.0 { rng.random_range(0.3..=1.0) * limit } else { 0.0 },
                freq: rng.random_range(cfg.freq_range[0]..=cfg.freq_range[1]),
                phase: rng.random_range(0.0..TAU),
            }
        };
        let mut joints = Vec::with_capacity(NUM_JOINTS);
        joints.push(joint(cfg.max_amplitude * cfg.root_fraction, rng));
        for _ in 1..NUM_JOINTS {
            joints.push(joint(cfg.max_amplitude, rng));
        }
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let base_yaw = sym(rng, cfg.max_base_yaw);
        let yaw_drift = sym(rng, cfg.max_yaw_drift);
        let camera = CameraTrajectory {
            s0: rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]),
            s_amp: sym(rng, cfg.scale_wobble),
            t0: [sym(rng, cfg.max_translation), sym(rng, cfg.max_translation)],
            t_amp: [sym(rng, cfg.translation_wobble), sym(rng, cfg.translation_wobble)],
            freq: rng.random_range(cfg.freq_range[0]..=cfg.freq_range[1]),
            phase: rng.random_range(0.0..TAU),
        };
        Self { joints, base_yaw, yaw_drift, camera }
    }

    /// Pose at (possibly fractional) frame `t`. The root block composes the
    /// yaw drift with its own sway and is stored in canonical form.
    pub fn pose_at(&self, t: f64) -> PoseParams {
        let mut theta = vec![0.0; POSE_DIM];
        for (j, m) in self.joints.iter().enumerate() {
            let a = m.amplitude * (TAU * m.freq * t + m.phase).sin();
            for c in 0..3 {
                theta[3 * j + c] = a * m.axis[c];
            }
        }
        let yaw = self.base_yaw + self.yaw_drift * t;
        if yaw != 0.0 {
            let sway = axis_angle_to_matrix(&AxisAngle::new(theta[0], theta[1], theta[2])).0;
            let r = axis_angle_to_matrix(&AxisAngle::new(0.0, yaw, 0.0)).0 * sway;
            let v = matrix_to_axis_angle(&RotMat(r)).expect("product of rotations").0;
            theta[..3].copy_from_slice(&[v.x, v.y, v.z]);
        }
        PoseParams::new(theta).expect("finite pose")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    pub spec: MotionSpec,
    pub poses: Vec<PoseParams>,
    pub cams: Vec<CameraParams>,
}

/// `t` frames at unit stride from a motion drawn with `seed`.
pub fn sample_motion(seed: u64, t: usize, cfg: &MotionConfig) -> Motion {
    sample_motion_strided(seed, t, 1, cfg)
}

pub fn sample_motion_strided(seed: u64, t: usize, stride: usize, cfg: &MotionConfig) -> Motion {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MotionSpec::random(&mut rng, cfg);
    let times = (0..t).map(|i| (i * stride) as f64);
    let poses = times.clone().map(|x| spec.pose_at(x)).collect();
    let cams = times.map(|x| spec.camera.at(x)).collect();
    Motion { spec, poses, cams }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Gaussian width in pixels.
    pub sigma: f64,
    pub bone_width: f64,
    pub splat_radius: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, sigma: 2.0, bone_width: 0.8, splat_radius: 1.5 }
    }
}

pub const RENDER_CHANNELS: usize = 3;

/// Normalized image coordinates (`[-1, 1]`, y up) to pixel coordinates.
pub fn to_pixel(p: [f64; 2], cfg: &RenderConfig) -> [f64; 2] {
    [(p[0] + 1.0) / 2.0 * (cfg.width - 1) as f64, (1.0 - p[1]) / 2.0 * (cfg.height - 1) as f64]
}

fn side_code(j: usize) -> f64 {
    use crate::body_model::JOINT_NAMES;
    let name = JOINT_NAMES[j];
    if name.starts_with("left") {
        1.0
    } else if name.starts_with("right") {
        0.6
    } else {
        0.8
    }
}

fn splat(img: &mut [f64], cfg: &RenderConfig, centre: [f64; 2], radius: f64, mut f: impl FnMut(f64, f64) -> f64) {
    let reach = radius.ceil() as isize;
    let (cx, cy) = (centre[0].round() as isize, centre[1].round() as isize);
    for y in (cy - reach).max(0)..=(cy + reach).min(cfg.height as isize - 1) {
        for x in (cx - reach).max(0)..=(cx + reach).min(cfg.width as isize - 1) {
            let v = &mut img[y as usize * cfg.width + x as usize];
            *v = f(x as f64 - centre[0], y as f64 - centre[1]).max(*v);
        }
    }
}

/// Renders from already projected geometry: one Gaussian per joint with
/// amplitude `amps[j]`, bones between parent and child, and a vertex
/// silhouette. Any input slice may be empty.
pub fn render_points(
    joints2d: &[[f64; 2]],
    amps: &[f64],
    bones: &[(usize, usize, f64)],
    verts2d: &[[f64; 2]],
    cfg: &RenderConfig,
) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = vec![0.0; RENDER_CHANNELS * h * w];
    let (heat, rest) = img.split_at_mut(h * w);
    let (bone_ch, sil) = rest.split_at_mut(h * w);

    let px: Vec<[f64; 2]> = joints2d.iter().map(|p| to_pixel(*p, cfg)).collect();
    let s2 = 2.0 * cfg.sigma * cfg.sigma;
    for (c, a) in px.iter().zip(amps) {
        let reach = (3.0 * cfg.sigma).ceil() as isize;
        let (cx, cy) = (c[0].round() as isize, c[1].round() as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2);
                heat[y as usize * w + x as usize] += a * (-d2 / s2).exp();
            }
        }
    }
    heat.iter_mut().for_each(|v| *v = v.min(1.0));

    let bw2 = 2.0 * cfg.bone_width * cfg.bone_width;
    for &(a, b, code) in bones {
        let (pa, pb) = (px[a], px[b]);
        let (dx, dy) = (pb[0] - pa[0], pb[1] - pa[1]);
        let len2 = dx * dx + dy * dy;
        let (x0, x1) = (pa[0].min(pb[0]) - 3.0, pa[0].max(pb[0]) + 3.0);
        let (y0, y1) = (pa[1].min(pb[1]) - 3.0, pa[1].max(pb[1]) + 3.0);
        let span = |lo: f64, hi: f64, n: usize| (lo.floor().max(0.0) as isize)..=(hi.ceil().min(n as f64 - 1.0) as isize);
        for y in span(y0, y1, h) {
            for x in span(x0, x1, w) {
                let (fx, fy) = (x as f64, y as f64);
                let u = if len2 > 0.0 { (((fx - pa[0]) * dx + (fy - pa[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let d2 = (fx - pa[0] - u * dx).powi(2) + (fy - pa[1] - u * dy).powi(2);
                let v = &mut bone_ch[y as usize * w + x as usize];
                *v = v.max(code * (-d2 / bw2).exp());
            }
        }
    }

    let r2 = 2.0 * cfg.splat_radius * cfg.splat_radius;
    for v in verts2d {
        splat(sil, cfg, to_pixel(*v, cfg), 2.0 * cfg.splat_radius, |dx, dy| (-(dx * dx + dy * dy) / r2).exp());
    }
    img
}

/// Renders a body: joint heatmaps brightened towards the camera, side-coded
/// bones (left brighter than right), and a soft vertex silhouette.
pub fn render(
    body: &BodyModelSpec,
    theta: &PoseParams,
    beta: &ShapeParams,
    cam: &CameraParams,
    cfg: &RenderConfig,
) -> Result<Vec<f64>> {
    let mesh = body.forward(theta, beta);
    let j3d = body.regress_joints(&mesh.vertices)?;
    Ok(render_geometry(body, &j3d, &mesh.vertices, cam, cfg))
}

fn render_geometry(
    body: &BodyModelSpec,
    j3d: &[[f64; 3]],
    vertices: &[[f64; 3]],
    cam: &CameraParams,
    cfg: &RenderConfig,
) -> Vec<f64> {
    let j2d = project(j3d, cam);
    // +z faces the camera
    let amps: Vec<f64> = j3d.iter().map(|p| (0.7 + 0.4 * p[2]).clamp(0.3, 1.0)).collect();
    let bones: Vec<(usize, usize, f64)> = (1..NUM_JOINTS)
        .map(|j| (body.parents[j] as usize, j, side_code(j)))
        .collect();
    render_points(&j2d, &amps, &bones, &project(vertices, cam), cfg)
}

/// One rendered frame with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `3 × H × W`, channel-major.
    pub image: Vec<f64>,
    pub theta: PoseParams,
    pub beta: ShapeParams,
    pub cam: CameraParams,
    pub j3d: Vec<[f64; 3]>,
    pub j2d: Vec<[f64; 2]>,
    pub flags: SupervisionFlags,
}

impl SynthSample {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            theta: Some(self.theta.as_slice().to_vec()),
            beta: Some(self.beta.0.to_vec()),
            j3d: Some(self.j3d.clone()),
            j2d: Some(self.j2d.clone()),
            visible: None,
            flags: self.flags,
        }
    }

    /// Recomputes the joint labels from `(θ, β, cam)`.
    pub fn relabel(&mut self, body: &BodyModelSpec) -> Result<()> {
        let mesh = body.forward(&self.theta, &self.beta);
        self.j3d = body.regress_joints(&mesh.vertices)?;
        self.j2d = project(&self.j3d, &self.cam);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub motion: MotionConfig,
    pub render: RenderConfig,
    /// Motion frames between consecutive samples of a clip.
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { motion: MotionConfig::default(), render: RenderConfig::default(), stride: 1 }
    }
}

/// Clips of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub sequences: Vec<Vec<SynthSample>>,
}

impl SequenceBatch {
    pub fn clip_len(&self) -> usize {
        self.sequences.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &SynthSample> {
        self.sequences.iter().flatten()
    }
}

/// One clip: motion, shape and rendering all derived from `seed`.
pub fn make_sequence(seed: u64, t: usize, body: &BodyModelSpec, cfg: &DataConfig) -> Result<Vec<SynthSample>> {
    let motion = sample_motion_strided(seed, t, cfg.stride.max(1), &cfg.motion);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let beta = random_shape(&mut rng, cfg.motion.beta_sigma);
    motion
        .poses
        .into_iter()
        .zip(motion.cams)
        .map(|(theta, cam)| {
            let mesh = body.forward(&theta, &beta);
            let j3d = body.regress_joints(&mesh.vertices)?;
            let j2d = project(&j3d, &cam);
            let image = render_geometry(body, &j3d, &mesh.vertices, &cam, &cfg.render);
            Ok(SynthSample { image, theta, beta, cam, j3d, j2d, flags: SupervisionFlags::ALL })
        })
        .collect()
}

/// `num_sequences` clips of length `t`; with probability `dropout` a clip
/// keeps only its 2D labels.
pub fn make_dataset(
    seed: u64,
    num_sequences: usize,
    t: usize,
    dropout: f64,
    body: &BodyModelSpec,
    cfg: &DataConfig,
) -> Result<SequenceBatch> {
    if t == 0 {
        return Err(Error::SequenceTooShort { need: 1, got: 0 });
    }
    if !(0.0..=1.0).contains(&dropout) {
        return Err(Error::Config(format!("dropout {dropout} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(num_sequences);
    for _ in 0..num_sequences {
        let clip_seed: u64 = rng.random();
        let only_2d = rng.random::<f64>() < dropout;
        let mut clip = make_sequence(clip_seed, t, body, cfg)?;
        if only_2d {
            clip.iter_mut().for_each(|s| s.flags = SupervisionFlags::ONLY_2D);
        }
        sequences.push(clip);
    }
    Ok(SequenceBatch { sequences })
}

/// Adds i.i.d. `N(0, σ²)` noise to every coordinate.
pub fn jitter_joints(j3d_seq: &[Frame], sigma: f64, seed: u64) -> Vec<Frame> {
    if sigma == 0.0 {
        return j3d_seq.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    j3d_seq
        .iter()
        .map(|f| f.iter().map(|p| p.map(|v| v + n.sample(&mut rng))).collect())
        .collect()
}

/// Perturbs every joint rotation of every frame by a random rotation of
/// angle ~ `N(0, σ²)` about a random axis, then relabels the joints. The
/// images stay clean, so the labels carry per-frame pose noise.
pub fn jitter_pose_labels(clip: &mut [SynthSample], sigma: f64, seed: u64, body: &BodyModelSpec) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    for s in clip.iter_mut() {
        let mut theta = s.theta.as_slice().to_vec();
        for j in 0..NUM_JOINTS {
            let axis: [f64; 3] = UnitSphere.sample(&mut rng);
            let noise = Vector3::from(axis) * n.sample(&mut rng);
            let r = axis_angle_to_matrix(&AxisAngle(noise)).0 * s.theta.rotation_matrices()[j];
            let v = matrix_to_axis_angle(&RotMat(r))?.0;
            theta[3 * j..3 * j + 3].copy_from_slice(&[v.x, v.y, v.z]);
        }
        s.theta = PoseParams::new(theta)?;
        s.relabel(body)?;
    }
    Ok(())
}
