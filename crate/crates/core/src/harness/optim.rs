//! Adam and SGD over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

use super::config::{OptimizerConfig, OptimizerKind};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    steps: usize,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, first: BTreeMap::new(), second: BTreeMap::new(), steps: 0 }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<f64> {
        let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.cfg.lr_at(self.steps);
        self.steps += 1;
        let t = self.steps as i32;
        for (name, g) in grads {
            let p = ps
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            let n = p.numel();
            match self.cfg.kind {
                OptimizerKind::Adam => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
                    for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gi = gi * clip;
                        *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                    }
                }
                OptimizerKind::Sgd => {
                    let mu = self.cfg.momentum;
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    for ((w, gi), mi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mi = mu * *mi + gi * clip;
                        *w -= lr * *mi;
                    }
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(kind: OptimizerKind, lr: f64) -> f64 {
        let mut ps = ParamStore::new();
        ps.insert("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let cfg = OptimizerConfig { kind, ..OptimizerConfig::adam(lr) };
        let mut opt = Optimizer::new(cfg);
        for _ in 0..500 {
            let g = ps.get("x").unwrap().clone();
            opt.step(&mut ps, &[("x".into(), g)]).unwrap();
        }
        ps.get("x").unwrap().data().iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        assert!(quadratic(OptimizerKind::Adam, 0.05) < 1e-2);
        assert!(quadratic(OptimizerKind::Sgd, 0.05) < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_sgd_step() {
        let mut ps = ParamStore::new();
        ps.insert("x", Tensor::zeros(&[1]));
        let cfg = OptimizerConfig { clip_norm: Some(1.0), ..OptimizerConfig::sgd(0.1) };
        let mut opt = Optimizer::new(cfg);
        let norm = opt.step(&mut ps, &[("x".into(), Tensor::full(&[1], 50.0))]).unwrap();
        assert_eq!(norm, 50.0);
        assert!((ps.get("x").unwrap().data()[0] + 0.1).abs() < 1e-15);
    }
}
