//! Temporal models over per-frame joint tokens.
//!
//! The per-joint model runs one shared encoder over each joint's token
//! trajectory independently. The whole-pose baseline squeezes each joint to
//! `d/24` channels, concatenates the pieces into one pose vector per frame,
//! and attends over those.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::body_model::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::int_base::{base_tokens, decode, extract_prediction, Decoded, ModelConfig, Prediction, SmplLayer, TokenVars};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    PerJoint,
    WholePose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalConfig {
    pub mode: TemporalMode,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Length `T₀` of the learned temporal embedding.
    pub base_len: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TemporalConfig {
    pub fn desk() -> Self {
        Self { mode: TemporalMode::PerJoint, layers: 2, heads: 4, ffn_mult: 4, base_len: 8 }
    }

    pub fn full() -> Self {
        Self { layers: 3, heads: 12, base_len: 16, ..Self::desk() }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("temporal heads {} must divide d={d}", self.heads)));
        }
        if self.base_len == 0 {
            return Err(Error::Config("temporal base_len must be positive".into()));
        }
        if self.mode == TemporalMode::WholePose && d % NUM_JOINTS != 0 {
            return Err(Error::Config(format!("whole-pose mode needs d divisible by 24, got {d}")));
        }
        Ok(())
    }
}

pub fn init_temporal<R: Rng>(ps: &mut ParamStore, rng: &mut R, cfg: &TemporalConfig, d: usize) -> Result<()> {
    cfg.validate(d)?;
    nn::init_normal(ps, rng, "temporal.embed", &[cfg.base_len, d], 0.02);
    nn::init_encoder(ps, rng, "temporal.enc", cfg.layers, d, cfg.ffn_mult);
    if cfg.mode == TemporalMode::WholePose {
        let piece = d / NUM_JOINTS;
        let limit = (6.0 / (d + piece) as f64).sqrt();
        let dist = Uniform::new(-limit, limit).expect("valid range");
        ps.insert("temporal.wp.in.weight", Tensor::from_fn(&[NUM_JOINTS, d, piece], |_| dist.sample(rng)));
        ps.insert("temporal.wp.in.bias", Tensor::zeros(&[NUM_JOINTS, piece]));
        ps.insert("temporal.wp.out.weight", Tensor::from_fn(&[NUM_JOINTS, piece, d], |_| dist.sample(rng)));
        ps.insert("temporal.wp.out.bias", Tensor::zeros(&[NUM_JOINTS, d]));
    }
    Ok(())
}

/// `[T, T₀]` linear interpolation weights along time, aligned at both ends.
/// A single output step samples the first embedding row.
pub fn interpolation_matrix(base_len: usize, t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, base_len]);
    for i in 0..t {
        let u = if t > 1 { i as f64 * (base_len - 1) as f64 / (t - 1) as f64 } else { 0.0 };
        let lo = (u.floor() as usize).min(base_len - 1);
        let hi = (lo + 1).min(base_len - 1);
        let frac = u - lo as f64;
        m.data_mut()[i * base_len + lo] += 1.0 - frac;
        if frac > 0.0 {
            m.data_mut()[i * base_len + hi] += frac;
        }
    }
    m
}

/// Resamples a `[T₀, d]` embedding to `[T, d]`.
pub fn interpolate_embedding(e: &Tensor, t: usize) -> Result<Tensor> {
    let s = e.shape();
    if s.len() != 2 || s[0] == 0 || t == 0 {
        return Err(Error::Shape(format!("cannot interpolate {s:?} to length {t}")));
    }
    if s[0] == t {
        return Ok(e.clone());
    }
    let m = interpolation_matrix(s[0], t);
    let mut out = Tensor::zeros(&[t, s[1]]);
    crate::autodiff::matmul(t, s[0], s[1], m.data(), false, e.data(), false, out.data_mut(), false);
    Ok(out)
}

fn embedding(g: &mut Graph, ps: &ParamStore, t: usize, d: usize) -> Result<Var> {
    let e = g.param(ps, "temporal.embed")?;
    let base_len = g.shape(e)[0];
    if base_len == t {
        return Ok(e);
    }
    let m = Arc::new(interpolation_matrix(base_len, t));
    let e3 = g.reshape(e, &[1, base_len, d])?;
    let out = g.left_mul_const(m, e3)?;
    g.reshape(out, &[t, d])
}

fn check_tokens(g: &Graph, x: Var) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [b, t, NUM_JOINTS, d] if t > 0 => Ok([b, t, NUM_JOINTS, d]),
        ref s => Err(Error::Shape(format!("temporal input must be [B, T, 24, d], got {s:?}"))),
    }
}

/// `[B, T, 24, d]` → `[B, T, 24, d]`; returns per-layer attention nodes with
/// probabilities laid out `[B·24, heads, T, T]`.
pub fn per_joint_temporal(g: &mut Graph, ps: &ParamStore, cfg: &TemporalConfig, x: Var) -> Result<(Var, Vec<Var>)> {
    let [b, t, n, d] = check_tokens(g, x)?;
    let xs = g.permute(x, &[0, 2, 1, 3])?;
    let xs = g.reshape(xs, &[b * n, t, d])?;
    let e = embedding(g, ps, t, d)?;
    let xs = g.add_broadcast(xs, e)?;
    let (y, attn) = nn::encoder(g, ps, "temporal.enc", xs, cfg.layers, cfg.heads)?;
    let y = g.reshape(y, &[b, n, t, d])?;
    Ok((g.permute(y, &[0, 2, 1, 3])?, attn))
}

/// Whole-pose baseline; attention laid out `[B, heads, T, T]`.
pub fn whole_pose_temporal(g: &mut Graph, ps: &ParamStore, cfg: &TemporalConfig, x: Var) -> Result<(Var, Vec<Var>)> {
    let [b, t, n, d] = check_tokens(g, x)?;
    if d % n != 0 {
        return Err(Error::Config(format!("whole-pose mode needs d divisible by 24, got {d}")));
    }
    let piece = d / n;
    let xs = g.reshape(x, &[b * t, n, d])?;
    let w_in = g.param(ps, "temporal.wp.in.weight")?;
    let b_in = g.param(ps, "temporal.wp.in.bias")?;
    let pieces = g.block_linear(xs, w_in, b_in)?;
    let pose = g.reshape(pieces, &[b, t, d])?;
    let e = embedding(g, ps, t, d)?;
    let pose = g.add_broadcast(pose, e)?;
    let (y, attn) = nn::encoder(g, ps, "temporal.enc", pose, cfg.layers, cfg.heads)?;
    let y = g.reshape(y, &[b * t, n, piece])?;
    let w_out = g.param(ps, "temporal.wp.out.weight")?;
    let b_out = g.param(ps, "temporal.wp.out.bias")?;
    let out = g.block_linear(y, w_out, b_out)?;
    Ok((g.reshape(out, &[b, t, n, d])?, attn))
}

pub fn temporal(g: &mut Graph, ps: &ParamStore, cfg: &TemporalConfig, x: Var) -> Result<(Var, Vec<Var>)> {
    match cfg.mode {
        TemporalMode::PerJoint => per_joint_temporal(g, ps, cfg, x),
        TemporalMode::WholePose => whole_pose_temporal(g, ps, cfg, x),
    }
}

/// Routes the joint tokens of `B·T` frames (clip-major) through the temporal
/// model when one is given; shape and camera tokens go straight to the heads.
pub fn temporal_decode(
    g: &mut Graph,
    ps: &ParamStore,
    cfg: Option<&TemporalConfig>,
    smpl: &SmplLayer,
    tok: &TokenVars,
    clips: usize,
    t: usize,
) -> Result<(Decoded, Vec<Var>)> {
    let s = g.shape(tok.joints).to_vec();
    if s[0] != clips * t {
        return Err(Error::Shape(format!("{} frames is not {clips} clips of {t}", s[0])));
    }
    let (joints, attn) = match cfg {
        Some(cfg) => {
            let x = g.reshape(tok.joints, &[clips, t, NUM_JOINTS, s[2]])?;
            let (y, attn) = temporal(g, ps, cfg, x)?;
            (g.reshape(y, &[clips * t, NUM_JOINTS, s[2]])?, attn)
        }
        None => (tok.joints, Vec::new()),
    };
    Ok((decode(g, ps, smpl, joints, tok.shape, tok.camera)?, attn))
}

/// Per-frame predictions for one clip plus the temporal attention maps.
#[derive(Debug, Clone)]
pub struct VideoPrediction {
    pub frames: Vec<Prediction>,
    /// One `[24, heads, T, T]` tensor per layer (`[1, heads, T, T]` for the
    /// whole-pose baseline).
    pub temporal_attention: Vec<Tensor>,
    /// Last Base-layer attention `[T, heads, S+26, S+26]`.
    pub base_attention: Option<Tensor>,
}

pub(crate) fn attention_tensor(g: &Graph, a: Var) -> Tensor {
    let (p, heads) = g.attention_probs(a).expect("attention node");
    let s = g.shape(a);
    let (b, t) = (s[0], s[1]);
    Tensor::new(vec![b, heads, t, t], p.to_vec()).expect("attention layout")
}

/// Video inference on `[T, C, H, W]` frames of one clip.
pub fn video_predict(
    ps: &ParamStore,
    mcfg: &ModelConfig,
    tcfg: &TemporalConfig,
    smpl: &SmplLayer,
    frames: &Tensor,
) -> Result<VideoPrediction> {
    let t = frames.shape().first().copied().unwrap_or(0);
    if t == 0 {
        return Err(Error::SequenceTooShort { need: 1, got: 0 });
    }
    let mut g = Graph::inference();
    let tok = base_tokens(&mut g, ps, mcfg, frames)?;
    let (dec, attn) = temporal_decode(&mut g, ps, Some(tcfg), smpl, &tok, 1, t)?;
    let frames = (0..t).map(|i| extract_prediction(&g, &dec, i)).collect::<Result<Vec<_>>>()?;
    Ok(VideoPrediction {
        frames,
        temporal_attention: attn.iter().map(|a| attention_tensor(&g, *a)).collect(),
        base_attention: tok.attention.last().map(|a| attention_tensor(&g, *a)),
    })
}
