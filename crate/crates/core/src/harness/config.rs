//! Run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::int_base::ModelConfig;
use crate::losses::LossWeights;
use crate::synthdata::DataConfig;
use crate::temporal::TemporalConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Steps at which the learning rate is multiplied by `decay_factor`.
    #[serde(default)]
    pub decay_at: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    #[serde(default)]
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_decay() -> f64 {
    0.1
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimizerKind::Adam, lr, decay_at: Vec::new(), decay_factor: 0.1, momentum: 0.0, clip_norm: None }
    }

    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, ..Self::adam(lr) }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self.decay_at.iter().filter(|m| step >= **m).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Independent frames, no temporal parameters.
    Image,
    /// Clips through the temporal model.
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub mode: TrainMode,
    pub steps: usize,
    /// Images per step in image mode, clips per step in video mode.
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    /// Probability that a training clip keeps only 2D labels.
    #[serde(default)]
    pub dropout: f64,
    /// Keep Base-model parameters fixed.
    #[serde(default)]
    pub freeze_base: bool,
}

impl PhaseConfig {
    pub fn phase1() -> Self {
        Self {
            mode: TrainMode::Image,
            steps: 1500,
            batch: 16,
            optimizer: OptimizerConfig { decay_at: vec![1200], ..OptimizerConfig::adam(1e-3) },
            weights: LossWeights { w_temp: 0.0, ..LossWeights::default() },
            dropout: 0.0,
            freeze_base: false,
        }
    }

    pub fn phase2() -> Self {
        Self {
            mode: TrainMode::Video,
            steps: 300,
            batch: 4,
            optimizer: OptimizerConfig { decay_at: vec![240], ..OptimizerConfig::adam(1e-3) },
            weights: LossWeights { w_temp: 0.0, ..LossWeights::default() },
            dropout: 0.3,
            freeze_base: false,
        }
    }

    pub fn phase3() -> Self {
        Self {
            mode: TrainMode::Video,
            steps: 100,
            batch: 4,
            optimizer: OptimizerConfig { decay_at: vec![80], clip_norm: Some(1.0), ..OptimizerConfig::sgd(1e-4) },
            weights: LossWeights { w_norm: 0.01, ..LossWeights::default() },
            dropout: 0.0,
            freeze_base: false,
        }
    }
}

/// Each phase table in a config file overrides only the keys it names; the
/// rest come from that phase's defaults.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phases {
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub phase3: PhaseConfig,
}

impl Default for Phases {
    fn default() -> Self {
        Self { phase1: PhaseConfig::phase1(), phase2: PhaseConfig::phase2(), phase3: PhaseConfig::phase3() }
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl<'de> Deserialize<'de> for Phases {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut patch = serde_json::Map::deserialize(de)?;
        let mut out = Self::default();
        for (key, slot) in [("phase1", &mut out.phase1), ("phase2", &mut out.phase2), ("phase3", &mut out.phase3)] {
            if let Some(p) = patch.remove(key) {
                let mut v = serde_json::to_value(&*slot).map_err(D::Error::custom)?;
                merge(&mut v, p);
                *slot = serde_json::from_value(v).map_err(|e| D::Error::custom(format!("{key}: {e}")))?;
            }
        }
        if let Some(k) = patch.keys().next() {
            return Err(D::Error::custom(format!("unknown phase `{k}`")));
        }
        Ok(out)
    }
}

impl Phases {
    pub fn get(&self, phase: u8) -> Result<&PhaseConfig> {
        match phase {
            1 => Ok(&self.phase1),
            2 => Ok(&self.phase2),
            3 => Ok(&self.phase3),
            p => Err(Error::Config(format!("phase must be 1, 2 or 3, got {p}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSettings {
    #[serde(flatten)]
    pub gen: DataConfig,
    /// Dataset seed; the run seed when absent.
    pub seed: Option<u64>,
    pub train_sequences: usize,
    /// Training clip length (equals the temporal base length by default).
    pub clip_len: usize,
    pub eval_sequences: usize,
    /// Per-frame rotation noise (radians) added to training pose labels.
    pub label_noise: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            gen: DataConfig::default(),
            seed: None,
            train_sequences: 32,
            clip_len: 8,
            eval_sequences: 8,
            label_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Multiplier from model units to reported units (1000 → millimetres).
    pub unit_scale: Option<f64>,
    pub fps: Option<f64>,
    pub body_seed: u64,
    pub body_vertices: usize,
    pub model: ModelConfig,
    pub temporal: TemporalConfig,
    pub data: DataSettings,
    pub phases: Phases,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            unit_scale: Some(1000.0),
            fps: None,
            body_seed: 0,
            body_vertices: crate::body_model::DEFAULT_VERTEX_COUNT,
            model: ModelConfig::desk(),
            temporal: TemporalConfig::desk(),
            data: DataSettings::default(),
            phases: Phases::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.temporal.validate(self.model.d)?;
        let [c, h, w] = self.model.image;
        let r = &self.data.gen.render;
        if c != crate::synthdata::RENDER_CHANNELS || h != r.height || w != r.width {
            return Err(Error::Config(format!(
                "model image {:?} does not match rendered {}x{}x{}",
                self.model.image,
                crate::synthdata::RENDER_CHANNELS,
                r.height,
                r.width
            )));
        }
        if self.body_vertices < crate::body_model::NUM_JOINTS {
            return Err(Error::Config("body needs at least 24 vertices".into()));
        }
        for p in 1..=3 {
            let ph = self.phases.get(p)?;
            ph.weights.validate()?;
            if ph.batch == 0 || !(ph.optimizer.lr > 0.0) {
                return Err(Error::Config(format!("phase {p}: batch and lr must be positive")));
            }
            if !(0.0..=1.0).contains(&ph.dropout) {
                return Err(Error::Config(format!("phase {p}: dropout outside [0, 1]")));
            }
        }
        if self.data.clip_len == 0 {
            return Err(Error::Config("clip_len must be positive".into()));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let partial = RunConfig::from_toml("seed = 7\n[model]\nd = 24\nheads = 4\n[phases.phase1]\nmode = \"image\"\nsteps = 5\nbatch = 2\nweights = {}\n[phases.phase1.optimizer]\nkind = \"adam\"\nlr = 0.01\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.model.d, 24);
        assert_eq!(partial.model.layers, 2);
        assert_eq!(partial.phases.phase1.weights.w_theta, 60.0);
        assert_eq!(partial.phases.phase2, PhaseConfig::phase2());

        let overlay = RunConfig::from_toml("[phases.phase3]\nsteps = 5\n[phases.phase3.optimizer]\nlr = 0.01\n").unwrap();
        let p3 = &overlay.phases.phase3;
        assert_eq!((p3.steps, p3.optimizer.lr), (5, 0.01));
        assert_eq!(p3.optimizer.kind, OptimizerKind::Sgd);
        assert_eq!(p3.optimizer.clip_norm, Some(1.0));
        assert_eq!(p3.weights.w_temp, 600.0);
        assert!(RunConfig::from_toml("[phases.phase4]\nsteps = 1\n").is_err());
        assert!(RunConfig::from_toml("[phases.phase1]\nmode = \"sideways\"\n").is_err());
    }

    #[test]
    fn phase_defaults_follow_schedule() {
        let p = Phases::default();
        assert_eq!(p.phase1.weights.w_temp, 0.0);
        assert_eq!(p.phase2.weights.w_temp, 0.0);
        assert!(p.phase2.dropout > 0.0);
        assert_eq!(p.phase3.weights.w_temp, 600.0);
        assert_eq!(p.phase3.weights.w_norm, 0.01);
        assert_eq!(p.phase3.optimizer.kind, OptimizerKind::Sgd);
        assert_eq!(p.phase1.optimizer.lr_at(0), 1e-3);
        assert!((p.phase1.optimizer.lr_at(1200) - 1e-4).abs() < 1e-18);
        assert!(p.get(4).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::from_toml("[model]\nd = 50\n").is_err());
        assert!(RunConfig::from_toml("[temporal]\nmode = \"whole_pose\"\n[model]\nd = 40\nheads = 4\n").is_err());
        assert!(RunConfig::from_toml("not toml at all = = =").is_err());
    }
}
