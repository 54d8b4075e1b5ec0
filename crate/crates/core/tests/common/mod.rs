#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokmesh::autodiff::ParamStore;
use tokmesh::harness::train::{ensure_temporal, loss_and_grad, training_data};
use tokmesh::harness::{build_body, init_params, PhaseConfig, RunConfig};
use tokmesh::int_base::SmplLayer;
use tokmesh::synthdata::{SequenceBatch, SynthSample};

/// Small-data run config on the desk model (d=48, L=2).
pub fn desk_config(seed: u64, sequences: usize, clip_len: usize) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.data.train_sequences = sequences;
    cfg.data.clip_len = clip_len;
    cfg
}

pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst: String,
    pub failures: Vec<String>,
}

/// Relative error with a floor on the denominator so that near-zero
/// gradients are judged on absolute error.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central finite differences of the total loss against the tape gradient
/// at `per_tensor` random entries of every parameter.
pub fn gradcheck(
    cfg: &RunConfig,
    pcfg: &PhaseConfig,
    body: &SmplLayer,
    ps: &ParamStore,
    clips: &[&[SynthSample]],
    per_tensor: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> GradCheck {
    let out = loss_and_grad(cfg, pcfg, body, ps, clips).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck { checked: 0, worst_rel: 0.0, worst: String::new(), failures: Vec::new() };
    let names: Vec<String> = ps.names().cloned().collect();
    for name in names {
        if pcfg.freeze_base && name.starts_with("base.") {
            continue;
        }
        let grad = out.grads.iter().find(|(n, _)| *n == name).map(|(_, t)| t.data().to_vec());
        let len = ps.get(&name).unwrap().data().len();
        for _ in 0..per_tensor.min(len) {
            let i = rng.random_range(0..len);
            let analytic = grad.as_ref().map_or(0.0, |g| g[i]);
            let eval = |delta: f64| {
                let mut p = ps.clone();
                p.get_mut(&name).unwrap().data_mut()[i] += delta;
                loss_and_grad(cfg, pcfg, body, &p, clips).unwrap().record.total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e > report.worst_rel {
                report.worst_rel = e;
                report.worst = format!("{name}[{i}]: tape {analytic:.6e} vs fd {numeric:.6e}");
            }
            if e >= tol {
                report.failures.push(format!("{name}[{i}]: tape {analytic:.6e} vs fd {numeric:.6e} (rel {e:.2e})"));
            }
        }
    }
    report
}

/// Parameters, body and data for gradient checks in both training modes.
pub fn gradcheck_setup(seed: u64) -> (RunConfig, SmplLayer, ParamStore, SequenceBatch) {
    let mut cfg = desk_config(seed, 2, 3);
    cfg.data.label_noise = 0.0;
    let body = build_body(&cfg).unwrap();
    let mut ps = init_params(&cfg).unwrap();
    ensure_temporal(&mut ps, &cfg).unwrap();
    let data = training_data(&cfg, &body, 0.5).unwrap();
    (cfg, body, ps, data)
}
