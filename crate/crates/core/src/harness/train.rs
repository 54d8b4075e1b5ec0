//! Progressive three-phase training.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::archive::Archive;
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::body_model::build_mini_model;
use crate::error::{Error, Result};
use crate::int_base::{base_tokens, init_base, SmplLayer};
use crate::losses::{graph_loss, BatchTargets, GroundTruth};
use crate::synthdata::{jitter_pose_labels, make_dataset, SequenceBatch, SynthSample};
use crate::temporal::{init_temporal, temporal_decode};

use super::checkpoint::Checkpoint;
use super::config::{PhaseConfig, RunConfig, TrainMode};
use super::optim::Optimizer;

const TEMPORAL_SALT: u64 = 0x7e39_0a1d_55c3_2b41;
const SHUFFLE_SALT: u64 = 0x2545_f491_4f6c_dd1d;
const NOISE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn build_body(cfg: &RunConfig) -> Result<SmplLayer> {
    Ok(SmplLayer::new(build_mini_model(cfg.body_seed, cfg.body_vertices)?))
}

/// Fresh Base-model and head parameters from the run seed.
pub fn init_params(cfg: &RunConfig) -> Result<ParamStore> {
    let mut ps = ParamStore::new();
    init_base(&mut ps, &mut ChaCha8Rng::seed_from_u64(cfg.seed), &cfg.model)?;
    Ok(ps)
}

/// Adds temporal parameters if absent. They depend only on the run seed, so
/// warm-starting from any Base checkpoint gives the same fresh values.
pub fn ensure_temporal(ps: &mut ParamStore, cfg: &RunConfig) -> Result<()> {
    if !ps.has_prefix("temporal.") {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TEMPORAL_SALT);
        init_temporal(ps, &mut rng, &cfg.temporal, cfg.model.d)?;
    }
    Ok(())
}

/// Training clips for a phase: the same motions in every phase, with the
/// phase's 2D-only dropout and the configured label noise.
pub fn training_data(cfg: &RunConfig, body: &SmplLayer, dropout: f64) -> Result<SequenceBatch> {
    let d = &cfg.data;
    let mut data = make_dataset(cfg.data_seed(), d.train_sequences, d.clip_len, dropout, &body.spec, &d.gen)?;
    if d.label_noise > 0.0 {
        for (i, clip) in data.sequences.iter_mut().enumerate() {
            let seed = cfg.data_seed() ^ NOISE_SALT ^ (i as u64).wrapping_mul(0x100_0000_01b3);
            jitter_pose_labels(clip, d.label_noise, seed, &body.spec)?;
        }
    }
    Ok(data)
}

/// Losses recorded at one optimizer step (before the update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub theta: f64,
    pub beta: f64,
    pub norm: f64,
    pub j3d: f64,
    pub j2d: f64,
    pub temp: f64,
    pub grad_norm: f64,
}

pub fn stack_images(samples: &[&SynthSample], image: [usize; 3]) -> Result<Tensor> {
    let len: usize = image.iter().product();
    let mut data = Vec::with_capacity(samples.len() * len);
    for s in samples {
        if s.image.len() != len {
            return Err(Error::Shape(format!("image has {} values, model expects {len}", s.image.len())));
        }
        data.extend_from_slice(&s.image);
    }
    Tensor::new(vec![samples.len(), image[0], image[1], image[2]], data)
}

/// Epoch-wise shuffled indices.
struct Sampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self { n, order: Vec::new(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// One loss evaluation plus its gradient.
pub struct StepOutput {
    pub record: StepRecord,
    pub grads: Vec<(String, Tensor)>,
}

/// Forward and backward on one batch. In image mode `clips` are single
/// frames; in video mode each clip goes through the temporal model.
pub fn loss_and_grad(
    cfg: &RunConfig,
    pcfg: &PhaseConfig,
    body: &SmplLayer,
    ps: &ParamStore,
    clips: &[&[SynthSample]],
) -> Result<StepOutput> {
    let t = clips.first().map_or(0, |c| c.len());
    if t == 0 || clips.iter().any(|c| c.len() != t) {
        return Err(Error::Shape("batch clips must share a positive length".into()));
    }
    let frames: Vec<&SynthSample> = clips.iter().flat_map(|c| c.iter()).collect();
    let images = stack_images(&frames, cfg.model.image)?;
    let gts: Vec<GroundTruth> = frames.iter().map(|s| s.ground_truth()).collect();
    let targets = BatchTargets::from_samples(&gts.iter().collect::<Vec<_>>())?;

    let mut g = Graph::new();
    if pcfg.freeze_base {
        g.freeze_prefix("base.");
    }
    let tok = base_tokens(&mut g, ps, &cfg.model, &images)?;
    let video = pcfg.mode == TrainMode::Video;
    let tcfg = video.then_some(&cfg.temporal);
    let (n_clips, clip_t) = if video { (clips.len(), t) } else { (frames.len(), 1) };
    let (dec, _) = temporal_decode(&mut g, ps, tcfg, body, &tok, n_clips, clip_t)?;
    let loss = graph_loss(&mut g, &dec, &targets, &pcfg.weights, video.then_some(t))?;
    let v = |x| g.value(x).item();
    let record = StepRecord {
        step: 0,
        total: v(loss.total),
        theta: v(loss.theta),
        beta: v(loss.beta),
        norm: v(loss.norm),
        j3d: v(loss.j3d),
        j2d: v(loss.j2d),
        temp: loss.temp.map_or(0.0, v),
        grad_norm: 0.0,
    };
    let grads = if record.total.is_finite() { g.backward(loss.total)? } else { Vec::new() };
    Ok(StepOutput { record, grads })
}

fn nan_dump(dir: &Path, ps: &ParamStore, grads: &[(String, Tensor)], rec: &StepRecord) -> Option<PathBuf> {
    let mut a = Archive::new();
    a.meta = json!({"kind": "nan_dump", "step": rec.step, "total": format!("{}", rec.total),
        "terms": {"theta": rec.theta, "beta": rec.beta, "norm": rec.norm, "j3d": rec.j3d, "j2d": rec.j2d, "temp": rec.temp}});
    for (n, t) in ps.iter() {
        a.insert_tensor(format!("param/{n}"), t).ok()?;
    }
    for (n, t) in grads {
        a.insert_tensor(format!("grad/{n}"), t).ok()?;
    }
    std::fs::create_dir_all(dir).ok()?;
    let path = dir.join("nan_dump.tkarch");
    a.save(&path).ok().map(|_| path)
}

/// Runs one phase from `params`. Image mode never creates temporal
/// parameters; video mode adds fresh ones when missing.
pub fn train_phase(
    cfg: &RunConfig,
    pcfg: &PhaseConfig,
    body: &SmplLayer,
    mut params: ParamStore,
    data: &SequenceBatch,
    shuffle_seed: u64,
    dump_dir: Option<&Path>,
) -> Result<(ParamStore, Vec<StepRecord>)> {
    let video = pcfg.mode == TrainMode::Video;
    if video {
        ensure_temporal(&mut params, cfg)?;
    }
    // image mode trains on frames, video mode on whole clips
    let units: Vec<&[SynthSample]> = if video {
        data.sequences.iter().map(Vec::as_slice).collect()
    } else {
        data.sequences.iter().flat_map(|c| c.chunks(1)).collect()
    };
    if units.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut sampler = Sampler::new(units.len(), shuffle_seed ^ SHUFFLE_SALT);
    let mut opt = Optimizer::new(pcfg.optimizer.clone());
    let mut log = Vec::with_capacity(pcfg.steps);
    for step in 0..pcfg.steps {
        let batch: Vec<&[SynthSample]> = sampler.next(pcfg.batch.min(units.len())).into_iter().map(|i| units[i]).collect();
        let out = loss_and_grad(cfg, pcfg, body, &params, &batch)?;
        let mut rec = StepRecord { step, ..out.record };
        let finite_grads = out.grads.iter().all(|(_, t)| t.is_finite());
        if !rec.total.is_finite() || !finite_grads {
            let dump = dump_dir.and_then(|d| nan_dump(d, &params, &out.grads, &rec));
            let detail = format!(
                "total={} theta={} beta={} norm={} j3d={} j2d={} temp={}, finite gradients: {finite_grads}{}",
                rec.total,
                rec.theta,
                rec.beta,
                rec.norm,
                rec.j3d,
                rec.j2d,
                rec.temp,
                dump.map(|p| format!(", state dumped to {}", p.display())).unwrap_or_default()
            );
            return Err(Error::NonFiniteLoss { step, detail });
        }
        rec.grad_norm = opt.step(&mut params, &out.grads)?;
        if !params.iter().all(|(_, t)| t.is_finite()) {
            let dump = dump_dir.and_then(|d| nan_dump(d, &params, &out.grads, &rec));
            let detail = format!(
                "parameters non-finite after update (grad norm {}){}",
                rec.grad_norm,
                dump.map(|p| format!(", state dumped to {}", p.display())).unwrap_or_default()
            );
            return Err(Error::NonFiniteLoss { step, detail });
        }
        log.push(rec);
    }
    Ok((params, log))
}

/// Writes a loss log as CSV (`step,total,theta,beta,norm,j3d,j2d,temp,grad_norm`).
pub fn write_loss_log(path: impl AsRef<Path>, log: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "total", "theta", "beta", "norm", "j3d", "j2d", "temp", "grad_norm"]).map_err(csv_err)?;
    for r in log {
        let vals = [r.total, r.theta, r.beta, r.norm, r.j3d, r.j2d, r.temp, r.grad_norm];
        let mut row = vec![r.step.to_string()];
        row.extend(vals.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Result of [`train`]: the final checkpoint and each phase's loss log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<(u8, Vec<StepRecord>)>,
}

/// Runs `phases` in order, starting from `init` (or fresh parameters), and
/// writes `phase{p}.tkarch` and `loss_phase{p}.csv` into `out_dir` when given.
pub fn train(cfg: &RunConfig, phases: &[u8], init: Option<Checkpoint>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let body = build_body(cfg)?;
    let (mut params, mut step) = match init {
        Some(ck) => (ck.params, ck.step),
        None => (init_params(cfg)?, 0),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut logs = Vec::new();
    let mut last_phase = 0;
    for &p in phases {
        let pcfg = cfg.phases.get(p)?;
        let data = training_data(cfg, &body, pcfg.dropout)?;
        let (next, log) = train_phase(cfg, pcfg, &body, params, &data, cfg.seed.wrapping_add(p as u64), out_dir)?;
        params = next;
        step += log.len();
        last_phase = p;
        if let Some(dir) = out_dir {
            write_loss_log(dir.join(format!("loss_phase{p}.csv")), &log)?;
            Checkpoint { config: cfg.clone(), phase: p, step, params: params.clone() }
                .save(dir.join(format!("phase{p}.tkarch")))?;
        }
        logs.push((p, log));
    }
    Ok(TrainOutcome { checkpoint: Checkpoint { config: cfg.clone(), phase: last_phase, step, params }, logs })
}
