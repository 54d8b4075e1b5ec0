//! Checkpoints and datasets as named-array archives.

use std::path::Path;

use serde_json::json;

use crate::archive::{Archive, ArrayData};
use crate::autodiff::ParamStore;
use crate::body_model::{CameraParams, PoseParams, ShapeParams, NUM_BETAS, NUM_JOINTS, POSE_DIM};
use crate::error::{Error, Result};
use crate::losses::SupervisionFlags;
use crate::synthdata::{SequenceBatch, SynthSample};

use super::config::RunConfig;

const PARAM_PREFIX: &str = "param/";

/// Trainable tensors plus the configuration and schedule position that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub phase: u8,
    pub step: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn has_temporal(&self) -> bool {
        self.params.has_prefix("temporal.")
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.meta = json!({
            "kind": "checkpoint",
            "phase": self.phase,
            "step": self.step,
            "config_hash": self.config.hash(),
            "config": serde_json::to_value(&self.config)?,
        });
        for (name, t) in self.params.iter() {
            a.insert_tensor(format!("{PARAM_PREFIX}{name}"), t)?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta.get("kind").and_then(|k| k.as_str()) != Some("checkpoint") {
            return Err(Error::Archive("archive is not a checkpoint".into()));
        }
        let field = |k: &str| a.meta.get(k).ok_or_else(|| Error::Archive(format!("checkpoint meta lacks {k}")));
        let config: RunConfig = serde_json::from_value(field("config")?.clone())?;
        let phase = field("phase")?.as_u64().ok_or_else(|| Error::Archive("bad phase".into()))? as u8;
        let step = field("step")?.as_u64().ok_or_else(|| Error::Archive("bad step".into()))? as usize;
        let mut params = ParamStore::new();
        for name in a.names() {
            if let Some(short) = name.strip_prefix(PARAM_PREFIX) {
                params.insert(short, a.tensor(name)?);
            }
        }
        Ok(Self { config, phase, step, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn flags_bytes(f: SupervisionFlags) -> [u8; 4] {
    [f.theta, f.beta, f.j3d, f.j2d].map(u8::from)
}

/// Arrays `images [N,T,C,H,W]`, `theta [N,T,72]`, `beta [N,T,10]`,
/// `cam [N,T,3]`, `j3d [N,T,24,3]`, `j2d [N,T,24,2]`, `flags [N,T,4]` (u8:
/// theta, beta, j3d, j2d).
pub fn dataset_to_archive(data: &SequenceBatch, image: [usize; 3]) -> Result<Archive> {
    let (n, t) = (data.len(), data.clip_len());
    let mut a = Archive::new();
    a.meta = json!({"kind": "dataset", "sequences": n, "clip_len": t});
    let frames: Vec<&SynthSample> = data.frames().collect();
    let cat = |f: &dyn Fn(&SynthSample) -> Vec<f64>| frames.iter().flat_map(|s| f(s)).collect::<Vec<f64>>();
    let [c, h, w] = image;
    a.insert_f64("images", &[n, t, c, h, w], cat(&|s| s.image.clone()))?;
    a.insert_f64("theta", &[n, t, POSE_DIM], cat(&|s| s.theta.as_slice().to_vec()))?;
    a.insert_f64("beta", &[n, t, NUM_BETAS], cat(&|s| s.beta.0.to_vec()))?;
    a.insert_f64("cam", &[n, t, 3], cat(&|s| vec![s.cam.s, s.cam.t[0], s.cam.t[1]]))?;
    a.insert_f64("j3d", &[n, t, NUM_JOINTS, 3], cat(&|s| s.j3d.as_flattened().to_vec()))?;
    a.insert_f64("j2d", &[n, t, NUM_JOINTS, 2], cat(&|s| s.j2d.as_flattened().to_vec()))?;
    let flags = frames.iter().flat_map(|s| flags_bytes(s.flags)).collect();
    a.insert("flags", &[n, t, 4], ArrayData::U8(flags))?;
    Ok(a)
}

pub fn dataset_from_archive(a: &Archive) -> Result<SequenceBatch> {
    let (shape, images) = a.f64("images")?;
    if shape.len() != 5 {
        return Err(Error::Archive(format!("images must be 5-D, got {shape:?}")));
    }
    let (n, t) = (shape[0], shape[1]);
    let img_len: usize = shape[2..].iter().product();
    let get = |name: &str, per: usize| -> Result<&[f64]> {
        let (s, v) = a.f64(name)?;
        if s.len() < 2 || s[0] != n || s[1] != t || v.len() != n * t * per {
            return Err(Error::Archive(format!("{name}: shape {s:?} inconsistent with images")));
        }
        Ok(v)
    };
    let theta = get("theta", POSE_DIM)?;
    let beta = get("beta", NUM_BETAS)?;
    let cam = get("cam", 3)?;
    let j3d = get("j3d", NUM_JOINTS * 3)?;
    let j2d = get("j2d", NUM_JOINTS * 2)?;
    let (fs, flags) = a.u8("flags")?;
    if fs != [n, t, 4] {
        return Err(Error::Archive(format!("flags: shape {fs:?}")));
    }
    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let mut clip = Vec::with_capacity(t);
        for k in 0..t {
            let f = i * t + k;
            let sl = |v: &[f64], per: usize| v[f * per..(f + 1) * per].to_vec();
            let fl = &flags[f * 4..f * 4 + 4];
            let c = sl(cam, 3);
            clip.push(SynthSample {
                image: sl(images, img_len),
                theta: PoseParams::new(sl(theta, POSE_DIM))?,
                beta: ShapeParams::from_slice(&sl(beta, NUM_BETAS))?,
                cam: CameraParams::new(c[0], [c[1], c[2]])?,
                j3d: sl(j3d, NUM_JOINTS * 3).chunks(3).map(|p| [p[0], p[1], p[2]]).collect(),
                j2d: sl(j2d, NUM_JOINTS * 2).chunks(2).map(|p| [p[0], p[1]]).collect(),
                flags: SupervisionFlags { theta: fl[0] != 0, beta: fl[1] != 0, j3d: fl[2] != 0, j2d: fl[3] != 0 },
            });
        }
        sequences.push(clip);
    }
    Ok(SequenceBatch { sequences })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::body_model::build_mini_model;
    use crate::synthdata::{make_dataset, DataConfig};

    #[test]
    fn checkpoint_round_trip() {
        let mut params = ParamStore::new();
        params.insert("base.a", Tensor::from_fn(&[2, 3], |i| (i as f64).sqrt() / 3.0));
        params.insert("temporal.e", Tensor::full(&[4], -1.5e-300));
        let ck = Checkpoint { config: RunConfig::default(), phase: 2, step: 17, params };
        let back = Checkpoint::from_archive(&Archive::from_bytes(&ck.to_archive().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, ck);
        assert!(back.has_temporal());
        assert!(Checkpoint::from_archive(&Archive::new()).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let body = build_mini_model(0, 100).unwrap();
        let data = make_dataset(3, 2, 2, 0.5, &body, &DataConfig::default()).unwrap();
        let a = dataset_to_archive(&data, [3, 64, 64]).unwrap();
        let back = dataset_from_archive(&Archive::from_bytes(&a.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, data);
    }
}
