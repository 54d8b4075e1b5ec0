mod common;

use std::path::Path;
use std::process::Command;

use tokmesh::archive::Archive;
use tokmesh::autodiff::Tensor;
use tokmesh::body_model::{PoseParams, ShapeParams};
use tokmesh::harness::eval::{eval_data, predict_clip, CSV_HEADER};
use tokmesh::harness::introspect::row_sums;
use tokmesh::harness::train::{ensure_temporal, loss_and_grad, training_data};
use tokmesh::harness::{
    build_body, dump_attention, evaluate, export_prior, init_params, Checkpoint, PhaseConfig, RunConfig, TrainMode,
};
use tokmesh::int_base::IDENTITY_6D;
use tokmesh::losses::{l_2d, l_3d, l_norm, l_smpl};
use tokmesh::synthdata::SynthSample;
use tokmesh::temporal::TemporalMode;

fn tiny_toml(out: &Path) -> String {
    format!(
        r#"seed = 3
out_dir = "{}"
body_vertices = 60

[model]
d = 24
layers = 1
heads = 2
patch = 16

[temporal]
layers = 1
heads = 2
base_len = 4

[data]
train_sequences = 2
clip_len = 4
eval_sequences = 1

[phases.phase1]
steps = 2
batch = 2

[phases.phase2]
steps = 2
batch = 1

[phases.phase3]
steps = 1
batch = 1
"#,
        out.display()
    )
}

#[test]
fn desk_gradients_match_finite_differences() {
    let (cfg, body, ps, data) = common::gradcheck_setup(7);
    for mut pcfg in [PhaseConfig::phase1(), PhaseConfig::phase3()] {
        pcfg.freeze_base = false;
        let clips: Vec<&[SynthSample]> = match pcfg.mode {
            TrainMode::Image => data.sequences.iter().flat_map(|c| c.chunks(1)).take(2).collect(),
            TrainMode::Video => data.sequences.iter().map(Vec::as_slice).collect(),
        };
        let r = common::gradcheck(&cfg, &pcfg, &body, &ps, &clips, 2, 1e-4, 1e-3, 8);
        assert!(r.failures.is_empty(), "{:?}", r.failures);
        assert!(r.checked > 50);
    }
}

#[test]
fn graph_loss_agrees_with_scalar_losses() {
    let (cfg, body, ps, data) = common::gradcheck_setup(9);
    let frames: Vec<&SynthSample> = data.sequences.iter().flatten().filter(|s| s.flags.theta).take(3).collect();
    assert!(!frames.is_empty());
    let clips: Vec<&[SynthSample]> = frames.iter().map(|s| std::slice::from_ref(*s)).collect();
    let pcfg = PhaseConfig::phase1();
    let rec = loss_and_grad(&cfg, &pcfg, &body, &ps, &clips).unwrap().record;

    // without temporal parameters predict_clip runs frames independently
    let mut ck = Checkpoint { config: cfg.clone(), phase: 1, step: 0, params: ps.clone() };
    ck.params.remove_prefix("temporal.");
    let (mut smpl, mut norm, mut j3d, mut j2d) = (0.0, 0.0, 0.0, 0.0);
    let w = &pcfg.weights;
    for s in &frames {
        let p = predict_clip(&ck, &body, std::slice::from_ref(*s)).unwrap().remove(0);
        let gt = s.ground_truth();
        let (th, be) = (p.estimate.theta.as_slice(), p.estimate.beta.0.as_slice());
        smpl += l_smpl(th, be, &gt, w).unwrap();
        norm += l_norm(th, be);
        j3d += l_3d(&p.j3d, &gt).unwrap();
        j2d += l_2d(&p.j2d, &gt).unwrap();
    }
    let n = frames.len() as f64;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
    assert!(close(w.w_theta * rec.theta + w.w_beta * rec.beta, smpl / n));
    assert!(close(rec.norm, norm / n));
    assert!(close(rec.j3d, j3d / n));
    assert!(close(rec.j2d, j2d / n));
}

#[test]
fn evaluation_accepts_longer_sequences_than_training() {
    let mut cfg = RunConfig::default();
    cfg.data.eval_sequences = 1;
    let mut params = init_params(&cfg).unwrap();
    ensure_temporal(&mut params, &cfg).unwrap();
    let ck = Checkpoint { config: cfg.clone(), phase: 2, step: 0, params };
    assert_eq!(cfg.temporal.base_len, 8);
    for t in [8, 16, 32] {
        let report = evaluate(&ck, t).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(report.rows.iter().all(|r| r.value.is_finite() && r.value >= 0.0), "T={t}: {:?}", report.rows);
    }
    assert!(evaluate(&ck, 2).is_err());
}

#[test]
fn attention_dump_counts_and_normalisation() {
    let cfg = RunConfig::default();
    let body = build_body(&cfg).unwrap();
    let mut params = init_params(&cfg).unwrap();
    ensure_temporal(&mut params, &cfg).unwrap();
    let ck = Checkpoint { config: cfg.clone(), phase: 2, step: 0, params };
    let clip = &eval_data(&cfg, &body, 6).unwrap().sequences[0];
    let a = dump_attention(&ck, clip).unwrap();
    let temporal: Vec<&String> = a.names().filter(|n| n.starts_with("temporal/joint")).collect();
    assert_eq!(temporal.len(), 24 * cfg.temporal.layers * cfg.temporal.heads);
    for n in temporal {
        let t = a.tensor(n).unwrap();
        assert_eq!(t.shape(), [6, 6]);
        assert!(row_sums(&t, 6).iter().all(|s| (s - 1.0).abs() < 1e-6), "{n}");
    }
    let prior = a.tensor("base/prior_to_patches").unwrap();
    assert_eq!(prior.shape(), [6, cfg.model.heads, 26, cfg.model.num_patches()]);

    let mut whole = ck.clone();
    whole.config.temporal.mode = TemporalMode::WholePose;
    whole.params.remove_prefix("temporal.");
    ensure_temporal(&mut whole.params, &whole.config).unwrap();
    let a = dump_attention(&whole, clip).unwrap();
    assert_eq!(a.names().filter(|n| n.starts_with("temporal/pose")).count(), cfg.temporal.layers * cfg.temporal.heads);
}

#[test]
fn exported_prior_is_rest_pose_under_zero_heads() {
    let cfg = RunConfig::default();
    let mut params = init_params(&cfg).unwrap();
    for name in ["head.rot.weight", "head.shape.weight", "head.shape.bias", "head.cam.weight"] {
        let shape = params.get(name).unwrap().shape().to_vec();
        params.insert(name, Tensor::zeros(&shape));
    }
    params.insert("head.rot.bias", Tensor::new(vec![6], IDENTITY_6D.to_vec()).unwrap());
    let ck = Checkpoint { config: cfg.clone(), phase: 1, step: 0, params };
    let a = export_prior(&ck).unwrap();
    let (shape, theta) = a.f64("theta").unwrap();
    assert_eq!(shape, [72]);
    assert!(theta.iter().all(|v| v.abs() < 1e-12));
    let body = build_body(&cfg).unwrap();
    let rest = body.spec.forward(&PoseParams::zeros(), &ShapeParams::zeros());
    let (_, verts) = a.f64("vertices").unwrap();
    assert!(verts.iter().zip(rest.vertices.as_flattened()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert_eq!(export_prior(&ck).unwrap(), a);
}

#[test]
fn reloaded_checkpoint_predicts_bitwise_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(&tiny_toml(dir.path())).unwrap();
    let body = build_body(&cfg).unwrap();
    let mut params = init_params(&cfg).unwrap();
    ensure_temporal(&mut params, &cfg).unwrap();
    let ck = Checkpoint { config: cfg.clone(), phase: 2, step: 3, params };
    let path = dir.path().join("ck.tkarch");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let clip = &training_data(&cfg, &body, 0.0).unwrap().sequences[0];
    let bits = |ck: &Checkpoint| -> Vec<u64> {
        predict_clip(ck, &body, clip).unwrap().iter().flat_map(|p| p.j3d.as_flattened().to_vec()).map(f64::to_bits).collect()
    };
    assert_eq!(bits(&ck), bits(&back));
    assert_eq!(back.config.hash(), cfg.hash());
}

#[test]
fn cli_runs_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, tiny_toml(&dir.path().join("run"))).unwrap();
    let bin = env!("CARGO_BIN_EXE_tokmesh");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let cfg = cfg_path.to_str().unwrap();
    run(&["train", "--config", cfg, "--phase", "1"]);
    let p1 = dir.path().join("run/phase1.tkarch");
    assert!(p1.exists() && dir.path().join("run/loss_phase1.csv").exists());
    run(&["train", "--config", cfg, "--phase", "2", "--checkpoint", p1.to_str().unwrap()]);
    let p2 = dir.path().join("run/phase2.tkarch");
    assert!(Checkpoint::load(&p2).unwrap().has_temporal());

    let ck = p2.to_str().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let csv = run(&["eval", "--checkpoint", ck, "--t-eval", "8", "--out", out]);
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER.join(","));
    assert_eq!(csv.lines().count(), 5);
    run(&["infer", "--checkpoint", ck, "--seed", "5", "--out", out]);
    run(&["inspect-attention", "--checkpoint", ck, "--out", out]);
    run(&["export-prior", "--checkpoint", ck, "--out", out]);
    for f in ["metrics.csv", "predictions.tkarch", "attention.tkarch", "prior.tkarch"] {
        assert!(Path::new(out).join(f).exists(), "{f}");
    }
    assert_eq!(Archive::load(Path::new(out).join("predictions.tkarch")).unwrap().f64("theta").unwrap().0, [4, 72]);

    let bad = Command::new(bin).args(["eval", "--checkpoint", cfg]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error"));
    let missing = Command::new(bin).args(["train", "--config", "/nonexistent/run.toml"]).output().unwrap();
    assert!(!missing.status.success());
}
