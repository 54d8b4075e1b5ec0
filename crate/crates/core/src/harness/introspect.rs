//! Attention dumps, prior-token export and inference archives.

use serde_json::json;

use crate::archive::Archive;
use crate::autodiff::{Graph, Tensor};
use crate::body_model::NUM_JOINTS;
use crate::error::Result;
use crate::int_base::{base_tokens, prior_estimate, Prediction, NUM_PRIOR_TOKENS};
use crate::synthdata::SynthSample;
use crate::temporal::{attention_tensor, video_predict};

use super::checkpoint::Checkpoint;
use super::train::{build_body, stack_images};

/// Names of the prior tokens in sequence order.
pub fn prior_token_names() -> Vec<String> {
    let mut names: Vec<String> = crate::body_model::JOINT_NAMES.iter().map(|n| format!("joint_{n}")).collect();
    names.push("shape".into());
    names.push("camera".into());
    names
}

/// Temporal attention per joint, layer and head
/// (`temporal/joint{jj}/layer{l}/head{h}`, each `[T, T]`), and the last
/// Base-layer attention from every prior token to the image patches
/// (`base/prior_to_patches`, `[T, heads, 26, S]`).
pub fn dump_attention(ck: &Checkpoint, clip: &[SynthSample]) -> Result<Archive> {
    let body = build_body(&ck.config)?;
    let frames: Vec<&SynthSample> = clip.iter().collect();
    let images = stack_images(&frames, ck.config.model.image)?;
    let t = clip.len();
    let mut a = Archive::new();

    let base_att = if ck.has_temporal() {
        let v = video_predict(&ck.params, &ck.config.model, &ck.config.temporal, &body, &images)?;
        let per_joint = ck.config.temporal.mode == crate::temporal::TemporalMode::PerJoint;
        for (l, att) in v.temporal_attention.iter().enumerate() {
            let heads = att.shape()[1];
            let rows = att.shape()[0];
            for r in 0..rows {
                for h in 0..heads {
                    let off = (r * heads + h) * t * t;
                    let name = if per_joint {
                        format!("temporal/joint{r:02}/layer{l}/head{h}")
                    } else {
                        format!("temporal/pose/layer{l}/head{h}")
                    };
                    a.insert_f64(name, &[t, t], att.data()[off..off + t * t].to_vec())?;
                }
            }
        }
        v.base_attention
    } else {
        let mut g = Graph::inference();
        let tok = base_tokens(&mut g, &ck.params, &ck.config.model, &images)?;
        tok.attention.last().map(|x| attention_tensor(&g, *x))
    };

    if let Some(att) = base_att {
        let (heads, len) = (att.shape()[1], att.shape()[2]);
        let s = len - NUM_PRIOR_TOKENS;
        let mut out = Vec::with_capacity(t * heads * NUM_PRIOR_TOKENS * s);
        for f in 0..t {
            for h in 0..heads {
                for q in s..len {
                    let row = ((f * heads + h) * len + q) * len;
                    out.extend_from_slice(&att.data()[row..row + s]);
                }
            }
        }
        a.insert_f64("base/prior_to_patches", &[t, heads, NUM_PRIOR_TOKENS, s], out)?;
    }
    a.meta = json!({
        "kind": "attention",
        "frames": t,
        "temporal_layers": ck.config.temporal.layers,
        "temporal_heads": ck.config.temporal.heads,
        "mode": ck.config.temporal.mode,
        "prior_tokens": prior_token_names(),
        "config_hash": ck.config.hash(),
    });
    Ok(a)
}

/// For each joint and frame, the frame (other than itself) receiving the
/// most attention, averaged over heads of the last temporal layer. Used
/// only as a reported probe.
pub fn attention_peaks(a: &Archive, t: usize, layer: usize, heads: usize) -> Result<Vec<Vec<usize>>> {
    (0..NUM_JOINTS)
        .map(|j| {
            let mut avg = vec![0.0; t * t];
            for h in 0..heads {
                let (_, m) = a.f64(&format!("temporal/joint{j:02}/layer{layer}/head{h}"))?;
                avg.iter_mut().zip(m).for_each(|(x, y)| *x += y);
            }
            Ok((0..t)
                .map(|r| {
                    (0..t)
                        .filter(|c| *c != r)
                        .max_by(|x, y| avg[r * t + x].total_cmp(&avg[r * t + y]))
                        .unwrap_or(r)
                })
                .collect())
        })
        .collect()
}

/// Decodes the learned prior tokens without an image.
pub fn export_prior(ck: &Checkpoint) -> Result<Archive> {
    let body = build_body(&ck.config)?;
    let (est, mesh) = prior_estimate(&ck.params, &ck.config.model, &body)?;
    let mut a = Archive::new();
    a.meta = json!({"kind": "prior", "config_hash": ck.config.hash()});
    a.insert_f64("theta", &[72], est.theta.as_slice().to_vec())?;
    a.insert_f64("beta", &[10], est.beta.0.to_vec())?;
    a.insert_f64("cam", &[3], vec![est.cam.s, est.cam.t[0], est.cam.t[1]])?;
    a.insert_f64("vertices", &[mesh.vertices.len(), 3], mesh.vertices.as_flattened().to_vec())?;
    a.insert_f64("joints", &[NUM_JOINTS, 3], mesh.joints.as_flattened().to_vec())?;
    Ok(a)
}

/// Per-frame predictions as arrays `theta [T,72]`, `beta [T,10]`,
/// `cam [T,3]`, `j3d [T,24,3]`, `j2d [T,24,2]`, `vertices [T,V,3]`.
pub fn predictions_archive(preds: &[Prediction]) -> Result<Archive> {
    let t = preds.len();
    let v = preds.first().map_or(0, |p| p.mesh.vertices.len());
    let cat = |f: &dyn Fn(&Prediction) -> Vec<f64>| preds.iter().flat_map(f).collect::<Vec<f64>>();
    let mut a = Archive::new();
    a.meta = json!({"kind": "predictions", "frames": t});
    a.insert_f64("theta", &[t, 72], cat(&|p| p.estimate.theta.as_slice().to_vec()))?;
    a.insert_f64("beta", &[t, 10], cat(&|p| p.estimate.beta.0.to_vec()))?;
    a.insert_f64("cam", &[t, 3], cat(&|p| vec![p.estimate.cam.s, p.estimate.cam.t[0], p.estimate.cam.t[1]]))?;
    a.insert_f64("j3d", &[t, NUM_JOINTS, 3], cat(&|p| p.j3d.as_flattened().to_vec()))?;
    a.insert_f64("j2d", &[t, NUM_JOINTS, 2], cat(&|p| p.j2d.as_flattened().to_vec()))?;
    a.insert_f64("vertices", &[t, v, 3], cat(&|p| p.mesh.vertices.as_flattened().to_vec()))?;
    Ok(a)
}

/// Stacks a tensor of attention rows for tests and tools.
pub fn row_sums(t: &Tensor, width: usize) -> Vec<f64> {
    t.data().chunks(width).map(|r| r.iter().sum()).collect()
}
