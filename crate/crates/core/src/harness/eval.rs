//! Evaluation on held-out synthetic clips and the metrics CSV.

use std::path::Path;

use crate::error::{Error, Result};
use crate::int_base::{predict_batch, Prediction, SmplLayer};
use crate::metrics::{accel_error, mpjpe, pa_mpjpe, pve, Frame};
use crate::synthdata::{make_dataset, SequenceBatch, SynthSample};
use crate::temporal::video_predict;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::train::{csv_err, stack_images};

const EVAL_SALT: u64 = 0x6a09_e667_f3bc_c908;

pub const CSV_HEADER: [&str; 4] = ["metric", "value", "unit", "config_hash"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([r.metric.as_str(), &format!("{:.6}", r.value), &r.unit, &self.config_hash])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Held-out clips of length `t_eval`, disjoint in seed from training data.
pub fn eval_data(cfg: &RunConfig, body: &SmplLayer, t_eval: usize) -> Result<SequenceBatch> {
    make_dataset(cfg.data_seed() ^ EVAL_SALT, cfg.data.eval_sequences, t_eval, 0.0, &body.spec, &cfg.data.gen)
}

/// Per-clip predicted and ground-truth joints and vertices.
#[derive(Debug, Clone, Default)]
pub struct EvalInputs {
    pub pred_joints: Vec<Vec<Frame>>,
    pub gt_joints: Vec<Vec<Frame>>,
    pub pred_vertices: Vec<Vec<Frame>>,
    pub gt_vertices: Vec<Vec<Frame>>,
}

impl EvalInputs {
    pub fn push_clip(&mut self, body: &SmplLayer, clip: &[SynthSample], preds: &[Prediction]) {
        self.pred_joints.push(preds.iter().map(|p| p.j3d.clone()).collect());
        self.pred_vertices.push(preds.iter().map(|p| p.mesh.vertices.clone()).collect());
        self.gt_joints.push(clip.iter().map(|s| s.j3d.clone()).collect());
        self.gt_vertices.push(clip.iter().map(|s| body.spec.forward(&s.theta, &s.beta).vertices).collect());
    }
}

/// Mean over clips of MPJPE, PA-MPJPE, PVE and acceleration error, scaled
/// to report units.
pub fn metric_rows(inputs: &EvalInputs, root_weights: &[f64], cfg: &RunConfig) -> Result<Vec<MetricRow>> {
    let n = inputs.pred_joints.len();
    if n == 0 {
        return Err(Error::Config("no clips to evaluate".into()));
    }
    let mut sums = [0.0; 4];
    for c in 0..n {
        let (p, g) = (&inputs.pred_joints[c], &inputs.gt_joints[c]);
        sums[0] += mpjpe(p, g)?;
        sums[1] += pa_mpjpe(p, g)?;
        sums[2] += pve(&inputs.pred_vertices[c], &inputs.gt_vertices[c], root_weights)?;
        sums[3] += accel_error(p, g)?;
    }
    let scale = cfg.unit_scale.unwrap_or(1.0);
    let unit = if cfg.unit_scale.is_some() { "mm" } else { "model" };
    let (acc_scale, acc_unit) = match cfg.fps {
        Some(fps) => (scale * fps * fps, format!("{unit}/s^2")),
        None => (scale, format!("{unit}/frame^2")),
    };
    let row = |metric: &str, v: f64, s: f64, u: &str| MetricRow { metric: metric.into(), value: v / n as f64 * s, unit: u.into() };
    Ok(vec![
        row("mpjpe", sums[0], scale, unit),
        row("pa_mpjpe", sums[1], scale, unit),
        row("pve", sums[2], scale, unit),
        row("accel_error", sums[3], acc_scale, &acc_unit),
    ])
}

/// Predictions for one clip: video mode when the checkpoint carries a
/// temporal model, independent frames otherwise.
pub fn predict_clip(ck: &Checkpoint, body: &SmplLayer, clip: &[SynthSample]) -> Result<Vec<Prediction>> {
    let frames: Vec<&SynthSample> = clip.iter().collect();
    let images = stack_images(&frames, ck.config.model.image)?;
    if ck.has_temporal() {
        Ok(video_predict(&ck.params, &ck.config.model, &ck.config.temporal, body, &images)?.frames)
    } else {
        predict_batch(&ck.params, &ck.config.model, body, &images)
    }
}

pub fn evaluate_on(ck: &Checkpoint, body: &SmplLayer, data: &SequenceBatch) -> Result<EvalReport> {
    let mut inputs = EvalInputs::default();
    for clip in &data.sequences {
        inputs.push_clip(body, clip, &predict_clip(ck, body, clip)?);
    }
    let root = &body.spec.joint_regressor[..body.num_vertices()];
    Ok(EvalReport { rows: metric_rows(&inputs, root, &ck.config)?, config_hash: ck.config.hash() })
}

/// Evaluates on freshly generated held-out clips of length `t_eval`.
pub fn evaluate(ck: &Checkpoint, t_eval: usize) -> Result<EvalReport> {
    if t_eval < 3 {
        return Err(Error::SequenceTooShort { need: 3, got: t_eval });
    }
    let body = super::train::build_body(&ck.config)?;
    let data = eval_data(&ck.config, &body, t_eval)?;
    evaluate_on(ck, &body, &data)
}
