//! Training losses. Every distance is a root-mean-square over the supervised
//! elements of one sample, so weights do not depend on vector length; batch
//! losses average those per-sample values.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::body_model::{NUM_BETAS, NUM_JOINTS, POSE_DIM};
use crate::error::{Error, Result};
use crate::int_base::Decoded;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_theta: f64,
    pub w_beta: f64,
    pub w_norm: f64,
    pub w_3d: f64,
    pub w_2d: f64,
    pub w_temp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_theta: 60.0, w_beta: 0.06, w_norm: 1.0, w_3d: 600.0, w_2d: 300.0, w_temp: 600.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_theta, self.w_beta, self.w_norm, self.w_3d, self.w_2d, self.w_temp];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Which annotations a sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SupervisionFlags {
    pub theta: bool,
    pub beta: bool,
    pub j3d: bool,
    pub j2d: bool,
}

impl SupervisionFlags {
    pub const ALL: Self = Self { theta: true, beta: true, j3d: true, j2d: true };
    pub const ONLY_2D: Self = Self { theta: false, beta: false, j3d: false, j2d: true };
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub theta: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub j3d: Option<Vec<[f64; 3]>>,
    pub j2d: Option<Vec<[f64; 2]>>,
    /// Per-joint 2D visibility; all visible when absent.
    pub visible: Option<Vec<bool>>,
    pub flags: SupervisionFlags,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        if self.theta.is_none() && self.beta.is_none() && self.j3d.is_none() && self.j2d.is_none() {
            return Err(Error::MissingSupervision("ground truth carries no field"));
        }
        let finite = self.theta.iter().flatten().chain(self.beta.iter().flatten()).all(|v| v.is_finite())
            && self.j3d.iter().flatten().flatten().all(|v| v.is_finite())
            && self.j2d.iter().flatten().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Shape("ground truth contains non-finite values".into()));
        }
        Ok(())
    }
}

fn rms<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

fn diff_rms(a: &[f64], b: &[f64], what: &'static str) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: {} vs {} elements", a.len(), b.len())));
    }
    Ok(rms(a.iter().zip(b).map(|(x, y)| x - y)))
}

fn field<'a, T>(flag: bool, f: &'a Option<T>, what: &'static str) -> Result<Option<&'a T>> {
    match (flag, f) {
        (false, _) => Ok(None),
        (true, Some(v)) => Ok(Some(v)),
        (true, None) => Err(Error::MissingSupervision(what)),
    }
}

pub fn l_smpl(theta: &[f64], beta: &[f64], gt: &GroundTruth, w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    if let Some(t) = field(gt.flags.theta, &gt.theta, "theta")? {
        total += w.w_theta * diff_rms(theta, t, "theta")?;
    }
    if let Some(b) = field(gt.flags.beta, &gt.beta, "beta")? {
        total += w.w_beta * diff_rms(beta, b, "beta")?;
    }
    Ok(total)
}

pub fn l_norm(theta: &[f64], beta: &[f64]) -> f64 {
    rms(theta.iter().copied()) + rms(beta.iter().copied())
}

pub fn l_3d(j3d: &[[f64; 3]], gt: &GroundTruth) -> Result<f64> {
    match field(gt.flags.j3d, &gt.j3d, "j3d")? {
        Some(g) => diff_rms(j3d.as_flattened(), g.as_flattened(), "j3d"),
        None => Ok(0.0),
    }
}

pub fn l_2d(j2d: &[[f64; 2]], gt: &GroundTruth) -> Result<f64> {
    let Some(g) = field(gt.flags.j2d, &gt.j2d, "j2d")? else {
        return Ok(0.0);
    };
    if j2d.len() != g.len() {
        return Err(Error::Shape(format!("j2d: {} vs {} joints", j2d.len(), g.len())));
    }
    let visible = |i: usize| gt.visible.as_ref().is_none_or(|v| v.get(i).copied().unwrap_or(false));
    Ok(rms(
        j2d.iter()
            .zip(g)
            .enumerate()
            .filter(|(i, _)| visible(*i))
            .flat_map(|(_, (p, q))| [p[0] - q[0], p[1] - q[1]]),
    ))
}

/// Velocity mismatch over a clip; zero for fewer than two frames.
pub fn l_temp(j3d_seq: &[Vec<[f64; 3]>], gt_seq: &[Vec<[f64; 3]>]) -> Result<f64> {
    if j3d_seq.len() != gt_seq.len() {
        return Err(Error::Shape(format!("l_temp: {} vs {} frames", j3d_seq.len(), gt_seq.len())));
    }
    let mut diffs = Vec::new();
    for t in 1..j3d_seq.len() {
        let (p0, p1, g0, g1) = (&j3d_seq[t - 1], &j3d_seq[t], &gt_seq[t - 1], &gt_seq[t]);
        if [p1.len(), g0.len(), g1.len()].iter().any(|n| *n != p0.len()) {
            return Err(Error::Shape("l_temp: ragged joint counts".into()));
        }
        for j in 0..p0.len() {
            for c in 0..3 {
                diffs.push((p1[j][c] - p0[j][c]) - (g1[j][c] - g0[j][c]));
            }
        }
    }
    Ok(rms(diffs))
}

/// Unweighted components except `smpl`, which already carries `w_θ`, `w_β`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub smpl: f64,
    pub norm: f64,
    pub j3d: f64,
    pub j2d: f64,
    pub temp: f64,
}

pub fn total(t: &LossTerms, w: &LossWeights) -> f64 {
    t.smpl + w.w_norm * t.norm + w.w_3d * t.j3d + w.w_2d * t.j2d + w.w_temp * t.temp
}

/// Batched targets with per-element masks (1 = supervised).
#[derive(Debug, Clone)]
pub struct BatchTargets {
    pub theta: Tensor,
    pub beta: Tensor,
    pub j3d: Tensor,
    pub j2d: Tensor,
    pub theta_mask: Arc<Tensor>,
    pub beta_mask: Arc<Tensor>,
    pub j3d_mask: Arc<Tensor>,
    pub j2d_mask: Arc<Tensor>,
}

impl BatchTargets {
    /// Stacks per-sample ground truth; absent fields are zero-filled and
    /// masked out.
    pub fn from_samples(gts: &[&GroundTruth]) -> Result<Self> {
        let n = gts.len();
        let mut theta = vec![0.0; n * POSE_DIM];
        let mut beta = vec![0.0; n * NUM_BETAS];
        let mut j3d = vec![0.0; n * NUM_JOINTS * 3];
        let mut j2d = vec![0.0; n * NUM_JOINTS * 2];
        let (mut tm, mut bm, mut m3, mut m2) = (theta.clone(), beta.clone(), j3d.clone(), j2d.clone());
        fn fill(dst: &mut [f64], mask: &mut [f64], src: &[f64], what: &'static str) -> Result<()> {
            if src.len() != dst.len() {
                return Err(Error::Shape(format!("{what}: expected {} values, got {}", dst.len(), src.len())));
            }
            dst.copy_from_slice(src);
            mask.fill(1.0);
            Ok(())
        }
        for (i, gt) in gts.iter().enumerate() {
            let r = |k: usize| i * k..(i + 1) * k;
            if let Some(t) = field(gt.flags.theta, &gt.theta, "theta")? {
                fill(&mut theta[r(POSE_DIM)], &mut tm[r(POSE_DIM)], t, "theta")?;
            }
            if let Some(b) = field(gt.flags.beta, &gt.beta, "beta")? {
                fill(&mut beta[r(NUM_BETAS)], &mut bm[r(NUM_BETAS)], b, "beta")?;
            }
            if let Some(j) = field(gt.flags.j3d, &gt.j3d, "j3d")? {
                fill(&mut j3d[r(NUM_JOINTS * 3)], &mut m3[r(NUM_JOINTS * 3)], j.as_flattened(), "j3d")?;
            }
            if let Some(j) = field(gt.flags.j2d, &gt.j2d, "j2d")? {
                fill(&mut j2d[r(NUM_JOINTS * 2)], &mut m2[r(NUM_JOINTS * 2)], j.as_flattened(), "j2d")?;
                if let Some(vis) = &gt.visible {
                    for (k, v) in vis.iter().enumerate().take(NUM_JOINTS) {
                        if !v {
                            m2[i * NUM_JOINTS * 2 + 2 * k] = 0.0;
                            m2[i * NUM_JOINTS * 2 + 2 * k + 1] = 0.0;
                        }
                    }
                }
            }
        }
        let t = |shape: &[usize], v: Vec<f64>| Tensor::new(shape.to_vec(), v);
        Ok(Self {
            theta: t(&[n, POSE_DIM], theta)?,
            beta: t(&[n, NUM_BETAS], beta)?,
            j3d: t(&[n, NUM_JOINTS * 3], j3d)?,
            j2d: t(&[n, NUM_JOINTS * 2], j2d)?,
            theta_mask: Arc::new(t(&[n, POSE_DIM], tm)?),
            beta_mask: Arc::new(t(&[n, NUM_BETAS], bm)?),
            j3d_mask: Arc::new(t(&[n, NUM_JOINTS * 3], m3)?),
            j2d_mask: Arc::new(t(&[n, NUM_JOINTS * 2], m2)?),
        })
    }

    pub fn len(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph nodes of every term, each a scalar batch mean.
#[derive(Debug, Clone, Copy)]
pub struct GraphLoss {
    pub total: Var,
    pub theta: Var,
    pub beta: Var,
    pub norm: Var,
    pub j3d: Var,
    pub j2d: Var,
    pub temp: Option<Var>,
}

fn masked_term(g: &mut Graph, pred: Var, target: &Tensor, mask: &Arc<Tensor>) -> Result<Var> {
    let n = target.shape()[0];
    let pred = g.reshape(pred, target.shape())?;
    let tv = g.constant(target.clone());
    let diff = g.sub(pred, tv)?;
    let per_sample = g.masked_rms(diff, mask.clone())?;
    debug_assert_eq!(g.shape(per_sample), &[n]);
    Ok(g.mean(per_sample))
}

/// Builds the weighted loss for a batch of decoded frames. With
/// `clip_len = Some(T)`, frames are grouped into clips of `T` (clip-major)
/// and the velocity term is added when `w_temp > 0`.
pub fn graph_loss(
    g: &mut Graph,
    dec: &Decoded,
    targets: &BatchTargets,
    w: &LossWeights,
    clip_len: Option<usize>,
) -> Result<GraphLoss> {
    let n = targets.len();
    if g.shape(dec.theta)[0] != n {
        return Err(Error::Shape(format!("{} predictions for {n} targets", g.shape(dec.theta)[0])));
    }
    let theta = masked_term(g, dec.theta, &targets.theta, &targets.theta_mask)?;
    let beta = masked_term(g, dec.beta, &targets.beta, &targets.beta_mask)?;
    let ones_t = Arc::new(Tensor::full(&[n, POSE_DIM], 1.0));
    let ones_b = Arc::new(Tensor::full(&[n, NUM_BETAS], 1.0));
    let nt = g.masked_rms(dec.theta, ones_t)?;
    let nb = g.masked_rms(dec.beta, ones_b)?;
    let nt = g.mean(nt);
    let nb = g.mean(nb);
    let norm = g.add(nt, nb)?;
    let j3d = masked_term(g, dec.j3d, &targets.j3d, &targets.j3d_mask)?;
    let j2d = masked_term(g, dec.j2d, &targets.j2d, &targets.j2d_mask)?;

    let temp = match clip_len {
        Some(t) if t >= 2 && w.w_temp > 0.0 => Some(velocity_term(g, dec.j3d, targets, t)?),
        _ => None,
    };

    let mut parts = vec![
        g.scale(theta, w.w_theta),
        g.scale(beta, w.w_beta),
        g.scale(norm, w.w_norm),
        g.scale(j3d, w.w_3d),
        g.scale(j2d, w.w_2d),
    ];
    if let Some(tv) = temp {
        parts.push(g.scale(tv, w.w_temp));
    }
    let mut total = parts[0];
    for p in &parts[1..] {
        total = g.add(total, *p)?;
    }
    Ok(GraphLoss { total, theta, beta, norm, j3d, j2d, temp })
}

fn velocity_term(g: &mut Graph, j3d: Var, targets: &BatchTargets, t: usize) -> Result<Var> {
    let n = targets.len();
    if n % t != 0 {
        return Err(Error::Shape(format!("{n} frames do not split into clips of {t}")));
    }
    let clips = n / t;
    let k = NUM_JOINTS * 3;
    let p = g.reshape(j3d, &[clips, t, k])?;
    let p1 = g.slice(p, 1, 1, t - 1)?;
    let p0 = g.slice(p, 1, 0, t - 1)?;
    let vel = g.sub(p1, p0)?;
    let (gt, m) = (targets.j3d.data(), targets.j3d_mask.data());
    let mut gv = Vec::with_capacity(clips * (t - 1) * k);
    let mut mv = Vec::with_capacity(clips * (t - 1) * k);
    for c in 0..clips {
        for s in 1..t {
            let (a, b) = ((c * t + s - 1) * k, (c * t + s) * k);
            for i in 0..k {
                gv.push(gt[b + i] - gt[a + i]);
                mv.push(m[b + i] * m[a + i]);
            }
        }
    }
    let gv = g.constant(Tensor::new(vec![clips, t - 1, k], gv)?);
    let diff = g.sub(vel, gv)?;
    let diff = g.reshape(diff, &[clips, (t - 1) * k])?;
    let per_clip = g.masked_rms(diff, Arc::new(Tensor::new(vec![clips, (t - 1) * k], mv)?))?;
    Ok(g.mean(per_clip))
}
