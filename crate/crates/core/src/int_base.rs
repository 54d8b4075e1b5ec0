//! Image-mode model: patch embedding, 24 + 1 + 1 learnable prior tokens,
//! a transformer encoder, and the three linear SMPL heads.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, ParamStore, Tensor, Var};
use crate::body_model::{
    BodyModelSpec, CameraParams, MeshOutput, PoseParams, ShapeParams, NUM_BETAS, NUM_JOINTS,
    POSE_DIM,
};
use crate::error::{Error, Result};
use crate::nn;

/// Number of prior tokens appended after the image tokens.
pub const NUM_PRIOR_TOKENS: usize = NUM_JOINTS + 2;
pub const ROT6D_DIM: usize = 6;
pub const CAMERA_DIM: usize = 3;
/// 6D encoding of the identity rotation.
pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub patch: usize,
    /// `(C, H, W)`.
    pub image: [usize; 3],
    pub conv_stem: bool,
    pub stem_channels: usize,
    pub prior_init_std: f64,
    pub head_init_std: f64,
    /// Camera scale produced by the camera head's initial bias.
    pub init_cam_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d: 48,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            patch: 8,
            image: [3, 64, 64],
            conv_stem: false,
            stem_channels: 8,
            prior_init_std: 0.02,
            head_init_std: 0.01,
            init_cam_scale: 0.9,
        }
    }

    /// Full-size dimensions (d=768, 6 blocks, 12 heads, FFN 3072).
    pub fn full() -> Self {
        Self {
            d: 768,
            layers: 6,
            heads: 12,
            ffn_mult: 4,
            patch: 16,
            image: [3, 224, 224],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image;
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("d={} must be divisible by heads={}", self.d, self.heads)));
        }
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 || c == 0 {
            return Err(Error::Config(format!("image {:?} not divisible by patch {}", self.image, self.patch)));
        }
        if self.conv_stem && self.stem_channels == 0 {
            return Err(Error::Config("conv stem needs at least one channel".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image[1] / self.patch) * (self.image[2] / self.patch)
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + NUM_PRIOR_TOKENS
    }

    fn patch_channels(&self) -> usize {
        if self.conv_stem {
            self.stem_channels
        } else {
            self.image[0]
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_channels() * self.patch * self.patch
    }

    pub fn image_len(&self) -> usize {
        self.image.iter().product()
    }
}

/// Body model plus its joint regressor as a tape constant.
#[derive(Debug, Clone)]
pub struct SmplLayer {
    pub spec: Arc<BodyModelSpec>,
    regressor: Arc<Tensor>,
}

impl SmplLayer {
    pub fn new(spec: BodyModelSpec) -> Self {
        let v = spec.num_vertices();
        let regressor = Arc::new(
            Tensor::new(vec![NUM_JOINTS, v], spec.joint_regressor.clone()).expect("validated spec"),
        );
        Self { spec: Arc::new(spec), regressor }
    }

    pub fn num_vertices(&self) -> usize {
        self.spec.num_vertices()
    }
}

pub fn init_base<R: Rng>(ps: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d;
    if cfg.conv_stem {
        nn::init_linear(ps, rng, "base.stem.conv3", cfg.image[0] * 9, cfg.stem_channels);
        nn::init_linear(ps, rng, "base.stem.conv1", cfg.stem_channels, cfg.stem_channels);
    }
    nn::init_linear(ps, rng, "base.patch", cfg.patch_dim(), d);
    nn::init_normal(ps, rng, "base.pos_embed", &[cfg.num_patches(), d], 0.02);
    nn::init_normal(ps, rng, "base.prior.joints", &[NUM_JOINTS, d], cfg.prior_init_std);
    nn::init_normal(ps, rng, "base.prior.shape", &[d], cfg.prior_init_std);
    nn::init_normal(ps, rng, "base.prior.camera", &[d], cfg.prior_init_std);
    nn::init_encoder(ps, rng, "base.enc", cfg.layers, d, cfg.ffn_mult);

    nn::init_normal(ps, rng, "head.rot.weight", &[d, ROT6D_DIM], cfg.head_init_std);
    ps.insert("head.rot.bias", Tensor::new(vec![ROT6D_DIM], IDENTITY_6D.to_vec())?);
    nn::init_normal(ps, rng, "head.shape.weight", &[d, NUM_BETAS], cfg.head_init_std);
    ps.insert("head.shape.bias", Tensor::zeros(&[NUM_BETAS]));
    nn::init_normal(ps, rng, "head.cam.weight", &[d, CAMERA_DIM], cfg.head_init_std);
    // softplus⁻¹(s₀) so the untrained camera starts at a plausible scale
    let s_raw = (cfg.init_cam_scale.exp() - 1.0).ln();
    ps.insert("head.cam.bias", Tensor::new(vec![CAMERA_DIM], vec![s_raw, 0.0, 0.0])?);
    Ok(())
}

/// Splits `[B, C, H, W]` images into `[B, S, C·p·p]` non-overlapping patches,
/// patches in raster order, features ordered `(c, dy, dx)`.
pub fn patchify(images: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let [c, h, w] = cfg.image;
    let s = images.shape();
    if s.len() != 4 || s[1..] != [c, h, w] {
        return Err(Error::Shape(format!("images {s:?} do not match {:?}", cfg.image)));
    }
    let (bsz, p) = (s[0], cfg.patch);
    let (gh, gw) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for b in 0..bsz {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ((b * c + ch) * h + py * p + dy) * w + px * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![bsz, gh * gw, c * p * p], out)
}

/// 3×3 zero-padded neighbourhoods: `[B, C, H, W]` → `[B, H, W, C·9]`.
fn im2col3(images: &Tensor) -> Tensor {
    let s = images.shape();
    let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = images.data();
    let mut out = Vec::with_capacity(bsz * h * w * c * 9);
    for b in 0..bsz {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (yy, xx) = (y as isize + ky - 1, x as isize + kx - 1);
                            let v = if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                0.0
                            } else {
                                src[((b * c + ch) * h + yy as usize) * w + xx as usize]
                            };
                            out.push(v);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![bsz, h, w, c * 9], out).expect("sizes match")
}

/// Image tokens `[B, S, d]`.
pub fn patch_embed(g: &mut Graph, ps: &ParamStore, cfg: &ModelConfig, images: &Tensor) -> Result<Var> {
    let [c, h, w] = cfg.image;
    let s = images.shape();
    if s.len() != 4 || s[1..] != [c, h, w] {
        return Err(Error::Shape(format!("images {s:?} do not match {:?}", cfg.image)));
    }
    let bsz = s[0];
    let patches = if cfg.conv_stem {
        let p = cfg.patch;
        let sc = cfg.stem_channels;
        let cols = g.constant(im2col3(images));
        let x = nn::linear(g, ps, "base.stem.conv3", cols)?;
        let x = g.gelu(x);
        let x = nn::linear(g, ps, "base.stem.conv1", x)?;
        let x = g.gelu(x);
        // [B, H, W, sc] → [B, gh, p, gw, p, sc] → [B, gh, gw, sc, p, p]
        let x = g.reshape(x, &[bsz, h / p, p, w / p, p, sc])?;
        let x = g.permute(x, &[0, 1, 3, 5, 2, 4])?;
        g.reshape(x, &[bsz, cfg.num_patches(), cfg.patch_dim()])?
    } else {
        g.constant(patchify(images, cfg)?)
    };
    nn::linear(g, ps, "base.patch", patches)
}

/// Adds the position embedding to the image tokens only and appends the
/// prior tokens unchanged: `[B, S, d]` → `[B, S + 26, d]`.
pub fn assemble(g: &mut Graph, patches: Var, pos_embed: Var, priors: Var) -> Result<Var> {
    let ps = g.shape(patches).to_vec();
    if ps.len() != 3 || g.shape(priors) != [NUM_PRIOR_TOKENS, ps[2]] {
        return Err(Error::Shape(format!(
            "assemble: patches {ps:?}, priors {:?}",
            g.shape(priors)
        )));
    }
    let img = g.add_broadcast(patches, pos_embed)?;
    let zeros = g.constant(Tensor::zeros(&[ps[0], NUM_PRIOR_TOKENS, ps[2]]));
    let pri = g.add_broadcast(zeros, priors)?;
    g.concat(&[img, pri], 1)
}

/// The `[26, d]` prior-token block in sequence order: joints, shape, camera.
pub fn prior_tokens(g: &mut Graph, ps: &ParamStore, d: usize) -> Result<Var> {
    let joints = g.param(ps, "base.prior.joints")?;
    let shape = g.param(ps, "base.prior.shape")?;
    let shape = g.reshape(shape, &[1, d])?;
    let camera = g.param(ps, "base.prior.camera")?;
    let camera = g.reshape(camera, &[1, d])?;
    g.concat(&[joints, shape, camera], 0)
}

/// Final-layer prior-token outputs.
#[derive(Debug, Clone)]
pub struct TokenVars {
    /// `[B, 24, d]`
    pub joints: Var,
    /// `[B, d]`
    pub shape: Var,
    /// `[B, d]`
    pub camera: Var,
    /// Per-layer attention nodes of the encoder.
    pub attention: Vec<Var>,
}

pub fn encode(g: &mut Graph, ps: &ParamStore, cfg: &ModelConfig, seq: Var) -> Result<(Var, Vec<Var>)> {
    nn::encoder(g, ps, "base.enc", seq, cfg.layers, cfg.heads)
}

/// Runs the Base model on `[B, C, H, W]` images.
pub fn base_tokens(g: &mut Graph, ps: &ParamStore, cfg: &ModelConfig, images: &Tensor) -> Result<TokenVars> {
    let patches = patch_embed(g, ps, cfg, images)?;
    let pos = g.param(ps, "base.pos_embed")?;
    let priors = prior_tokens(g, ps, cfg.d)?;
    let seq = assemble(g, patches, pos, priors)?;
    let (out, attention) = encode(g, ps, cfg, seq)?;
    let bsz = images.shape()[0];
    let s = cfg.num_patches();
    let joints = g.slice(out, 1, s, NUM_JOINTS)?;
    let shape = g.slice(out, 1, s + NUM_JOINTS, 1)?;
    let shape = g.reshape(shape, &[bsz, cfg.d])?;
    let camera = g.slice(out, 1, s + NUM_JOINTS + 1, 1)?;
    let camera = g.reshape(camera, &[bsz, cfg.d])?;
    Ok(TokenVars { joints, shape, camera, attention })
}

/// Shared affine map `d → 6` applied to every joint token.
pub fn rotation_head(g: &mut Graph, ps: &ParamStore, joint_tokens: Var) -> Result<Var> {
    nn::linear(g, ps, "head.rot", joint_tokens)
}

pub fn shape_head(g: &mut Graph, ps: &ParamStore, shape_token: Var) -> Result<Var> {
    nn::linear(g, ps, "head.shape", shape_token)
}

/// Camera head decoded to `(s, tx, ty)` with `s = softplus(raw)`.
pub fn camera_head(g: &mut Graph, ps: &ParamStore, camera_token: Var) -> Result<Var> {
    let raw = nn::linear(g, ps, "head.cam", camera_token)?;
    let s_raw = g.slice(raw, 1, 0, 1)?;
    let s = g.softplus(s_raw);
    let t = g.slice(raw, 1, 1, 2)?;
    g.concat(&[s, t], 1)
}

/// Everything decoded from one batch of tokens.
#[derive(Debug, Clone)]
pub struct Decoded {
    /// `[B, 24, 6]`
    pub sixd: Var,
    /// `[B, 24, 9]`
    pub rotmats: Var,
    /// `[B, 72]`
    pub theta: Var,
    /// `[B, 10]`
    pub beta: Var,
    /// `[B, 3]`
    pub cam: Var,
    /// `[B, V, 3]`
    pub vertices: Var,
    /// `[B, 24, 3]` forward-kinematics joints
    pub fk_joints: Var,
    /// `[B, 24, 3]` regressed joints
    pub j3d: Var,
    /// `[B, 24, 2]`
    pub j2d: Var,
}

/// Heads → rotations → body → regressed joints → projection. The skinned
/// body consumes the decoded rotation matrices directly; θ is their
/// logarithm and feeds the losses.
pub fn decode(
    g: &mut Graph,
    ps: &ParamStore,
    smpl: &SmplLayer,
    joint_tokens: Var,
    shape_token: Var,
    camera_token: Var,
) -> Result<Decoded> {
    let bsz = g.shape(joint_tokens)[0];
    let sixd = rotation_head(g, ps, joint_tokens)?;
    let rotmats = g.sixd_to_mat(sixd)?;
    let aa = g.mat_to_axis_angle(rotmats)?;
    let theta = g.reshape(aa, &[bsz, POSE_DIM])?;
    let beta = shape_head(g, ps, shape_token)?;
    let cam = camera_head(g, ps, camera_token)?;
    let body = g.body(smpl.spec.clone(), rotmats, beta)?;
    let nv = smpl.num_vertices();
    let vertices = g.slice(body, 1, 0, nv)?;
    let fk_joints = g.slice(body, 1, nv, NUM_JOINTS)?;
    let j3d = g.left_mul_const(smpl.regressor.clone(), vertices)?;
    let j2d = g.project(j3d, cam)?;
    Ok(Decoded { sixd, rotmats, theta, beta, cam, vertices, fk_joints, j3d, j2d })
}

/// Decoded SMPL parameters for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SmplEstimate {
    pub theta: PoseParams,
    pub beta: ShapeParams,
    pub cam: CameraParams,
}

/// Per-frame prediction: parameters, mesh, regressed 3D joints, 2D joints.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub estimate: SmplEstimate,
    pub mesh: MeshOutput,
    pub j3d: Vec<[f64; 3]>,
    pub j2d: Vec<[f64; 2]>,
}

fn rows3(t: &Tensor, b: usize, n: usize) -> Vec<[f64; 3]> {
    t.data()[b * n * 3..(b + 1) * n * 3].chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Reads batch entry `b` of a decoded graph into plain values.
pub fn extract_prediction(g: &Graph, dec: &Decoded, b: usize) -> Result<Prediction> {
    let theta = PoseParams::new(g.value(dec.theta).data()[b * POSE_DIM..(b + 1) * POSE_DIM].to_vec())?;
    let beta = ShapeParams::from_slice(&g.value(dec.beta).data()[b * NUM_BETAS..(b + 1) * NUM_BETAS])?;
    let c = &g.value(dec.cam).data()[b * 3..b * 3 + 3];
    let cam = CameraParams::new(c[0], [c[1], c[2]])?;
    let nv = g.shape(dec.vertices)[1];
    let mesh = MeshOutput {
        vertices: rows3(g.value(dec.vertices), b, nv),
        joints: rows3(g.value(dec.fk_joints), b, NUM_JOINTS),
    };
    let j3d = rows3(g.value(dec.j3d), b, NUM_JOINTS);
    let j2d = g.value(dec.j2d).data()[b * NUM_JOINTS * 2..(b + 1) * NUM_JOINTS * 2]
        .chunks(2)
        .map(|c| [c[0], c[1]])
        .collect();
    Ok(Prediction { estimate: SmplEstimate { theta, beta, cam }, mesh, j3d, j2d })
}

/// Image-mode inference on a batch of `[B, C, H, W]` images.
pub fn predict_batch(
    ps: &ParamStore,
    cfg: &ModelConfig,
    smpl: &SmplLayer,
    images: &Tensor,
) -> Result<Vec<Prediction>> {
    let mut g = Graph::inference();
    let tok = base_tokens(&mut g, ps, cfg, images)?;
    let dec = decode(&mut g, ps, smpl, tok.joints, tok.shape, tok.camera)?;
    (0..images.shape()[0]).map(|b| extract_prediction(&g, &dec, b)).collect()
}

/// Image-mode inference on one `C × H × W` image (flat, channel-major).
pub fn predict(ps: &ParamStore, cfg: &ModelConfig, smpl: &SmplLayer, image: &[f64]) -> Result<Prediction> {
    let [c, h, w] = cfg.image;
    let images = Tensor::new(vec![1, c, h, w], image.to_vec())?;
    Ok(predict_batch(ps, cfg, smpl, &images)?.remove(0))
}

/// Applies the heads directly to the learnable prior tokens: no image, no
/// encoder.
pub fn prior_estimate(ps: &ParamStore, cfg: &ModelConfig, smpl: &SmplLayer) -> Result<(SmplEstimate, MeshOutput)> {
    let mut g = Graph::inference();
    let joints = g.param(ps, "base.prior.joints")?;
    let joints = g.reshape(joints, &[1, NUM_JOINTS, cfg.d])?;
    let shape = g.param(ps, "base.prior.shape")?;
    let shape = g.reshape(shape, &[1, cfg.d])?;
    let camera = g.param(ps, "base.prior.camera")?;
    let camera = g.reshape(camera, &[1, cfg.d])?;
    let dec = decode(&mut g, ps, smpl, joints, shape, camera)?;
    let p = extract_prediction(&g, &dec, 0)?;
    Ok((p.estimate, p.mesh))
}

/// Camera scale for a raw head output (exposed for tests).
pub fn decode_camera_scale(s_raw: f64) -> f64 {
    softplus(s_raw)
}
