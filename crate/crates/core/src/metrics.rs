//! Pose-estimation metrics over joint sequences (`T` frames of `N` points).
//! Values are in model units; multiply by a unit scale for millimetres.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::rotations::RotMat;

pub type Frame = Vec<[f64; 3]>;

/// `x ↦ scale · rot · x + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rot: RotMat,
    pub trans: [f64; 3],
}

impl SimilarityTransform {
    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let v = self.rot.0 * Vector3::from(*p) * self.scale + Vector3::from(self.trans);
        [v.x, v.y, v.z]
    }
}

fn centroid(p: &[[f64; 3]]) -> Vector3<f64> {
    p.iter().map(|x| Vector3::from(*x)).sum::<Vector3<f64>>() / p.len() as f64
}

/// Least-squares similarity transform taking `p` onto `q`, reflections
/// excluded.
pub fn procrustes_align(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<SimilarityTransform> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("procrustes: {} vs {} points", p.len(), q.len())));
    }
    if p.len() < 3 {
        return Err(Error::DegeneratePoints);
    }
    let (mp, mq) = (centroid(p), centroid(q));
    let mut var_p = 0.0;
    let mut cov = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        let pa = Vector3::from(*a) - mp;
        let qb = Vector3::from(*b) - mq;
        var_p += pa.norm_squared();
        cov += qb * pa.transpose();
    }
    let scale_ref = mp.norm().max(1.0);
    if var_p <= 1e-24 * scale_ref * scale_ref * p.len() as f64 {
        return Err(Error::DegeneratePoints);
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * vt;
    let sv = svd.singular_values;
    let scale = (sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)]) / var_p;
    let t = mq - rot * mp * scale;
    Ok(SimilarityTransform { scale, rot: RotMat(rot), trans: [t.x, t.y, t.z] })
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_seq(pred: &[Frame], gt: &[Frame]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} vs {} frames", pred.len(), gt.len())));
    }
    for (a, b) in pred.iter().zip(gt) {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::Shape(format!("{} vs {} points in a frame", a.len(), b.len())));
        }
    }
    Ok(())
}

fn mean_aligned(pred: &[Frame], gt: &[Frame], root: impl Fn(usize, bool) -> [f64; 3]) -> Result<f64> {
    check_seq(pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, (a, b)) in pred.iter().zip(gt).enumerate() {
        let (ra, rb) = (root(t, true), root(t, false));
        for (p, q) in a.iter().zip(b) {
            let pa = [p[0] - ra[0], p[1] - ra[1], p[2] - ra[2]];
            let qb = [q[0] - rb[0], q[1] - rb[1], q[2] - rb[2]];
            sum += dist(&pa, &qb);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Mean joint distance after aligning each frame's root joint (index 0).
pub fn mpjpe(pred: &[Frame], gt: &[Frame]) -> Result<f64> {
    mean_aligned(pred, gt, |t, is_pred| if is_pred { pred[t][0] } else { gt[t][0] })
}

/// Mean joint distance after per-frame Procrustes alignment.
pub fn pa_mpjpe(pred: &[Frame], gt: &[Frame]) -> Result<f64> {
    check_seq(pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in pred.iter().zip(gt) {
        let tr = procrustes_align(a, b)?;
        for (p, q) in a.iter().zip(b) {
            sum += dist(&tr.apply(p), q);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Mean vertex distance after aligning the regressed root joint;
/// `root_weights` is the root row of the joint regressor.
pub fn pve(pred: &[Frame], gt: &[Frame], root_weights: &[f64]) -> Result<f64> {
    check_seq(pred, gt)?;
    if pred.iter().chain(gt).any(|f| f.len() != root_weights.len()) {
        return Err(Error::Shape("pve: root weights do not match vertex count".into()));
    }
    let regress = |f: &Frame| {
        let mut r = [0.0; 3];
        for (v, w) in f.iter().zip(root_weights) {
            for c in 0..3 {
                r[c] += w * v[c];
            }
        }
        r
    };
    let roots: Vec<([f64; 3], [f64; 3])> = pred.iter().zip(gt).map(|(a, b)| (regress(a), regress(b))).collect();
    mean_aligned(pred, gt, |t, is_pred| if is_pred { roots[t].0 } else { roots[t].1 })
}

/// Mean norm of the second-difference mismatch, in units per frame².
pub fn accel_error(pred: &[Frame], gt: &[Frame]) -> Result<f64> {
    check_seq(pred, gt)?;
    let t = pred.len();
    if t < 3 {
        return Err(Error::SequenceTooShort { need: 3, got: t });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in 1..t - 1 {
        for j in 0..pred[s].len() {
            let acc = |f: &[Frame], c: usize| f[s + 1][j][c] - 2.0 * f[s][j][c] + f[s - 1][j][c];
            let d: [f64; 3] = std::array::from_fn(|c| acc(pred, c) - acc(gt, c));
            sum += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            n += 1;
        }
    }
    Ok(sum / n as f64)
}
