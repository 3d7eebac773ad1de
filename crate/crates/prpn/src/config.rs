//! Run configuration: one JSON file with `model`, `trainer` and `data`
//! sections, adjustable with `dot.path=value` overrides.

use std::path::{Path, PathBuf};

use prpn_core::model::ModelConfig;
use prpn_core::optim::{AdamConfig, PlateauSchedule};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Truncated back-propagation window.
    pub bptt: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_patience")]
    pub patience: u32,
    #[serde(default = "default_decay")]
    pub decay: f64,
    /// Caps an epoch for corpora too large to sweep at desk scale.
    #[serde(default)]
    pub max_steps_per_epoch: Option<usize>,
    /// Emits a training-loss log line every this many steps.
    #[serde(default)]
    pub log_every: Option<u64>,
}

fn default_eval_batch() -> usize {
    10
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    1.0
}
fn default_patience() -> u32 {
    2
}
fn default_decay() -> f64 {
    0.1
}

impl TrainerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> PlateauSchedule {
        PlateauSchedule {
            patience: self.patience,
            factor: self.decay,
            ..PlateauSchedule::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub valid: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Each line is an independent sentence (zero state, padded batches).
    #[serde(default)]
    pub sentences: bool,
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, applies overrides and validates the result.
    /// Relative data paths are resolved against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg = Self::from_value(value)?;
        if let Some(dir) = path.parent() {
            cfg.data.resolve(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.trainer;
        for (name, v) in [("batch_size", t.batch_size), ("bptt", t.bptt)] {
            if v == 0 {
                return Err(Error::Config(format!("trainer.{name} must be positive")));
            }
        }
        if t.eval_batch_size == 0 {
            return Err(Error::Config("trainer.eval_batch_size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config("trainer.lr must be positive".into()));
        }
        for (name, b) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("trainer.{name} must lie in [0, 1)")));
            }
        }
        if !(t.clip_norm > 0.0) || !(t.decay > 0.0 && t.decay <= 1.0) || t.patience == 0 {
            return Err(Error::Config("trainer clip_norm, decay and patience must be positive".into()));
        }
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 1;
        }
        model.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

impl DataConfig {
    fn resolve(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.train);
        self.valid.as_mut().map(fix);
        self.test.as_mut().map(fix);
    }
}

/// Applies `a.b.c=value`; `value` is parsed as JSON and taken as a plain
/// string when that fails.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override path {path:?} has an empty segment")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("override path has at least one segment")
}
