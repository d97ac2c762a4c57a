//! Run configuration, profiles and the flat `key = value` config file.
//!
//! Keys are dotted paths into [`RunConfig`], e.g. `model.vae.width = 64`
//! or `optimizer.lr = 5e-4`. Values are JSON literals; bare words are read
//! as strings. Lines starting with `#` are ignored.

use std::path::Path;

use mcld_core::domain::SkeletonSpec;
use mcld_core::metrics::Distance;
use mcld_core::model::ModelConfig;
use mcld_core::nn::AdamWConfig;
use mcld_synthdata::{BehaviorKind, BehaviorSpec, DatasetSpec, RoomSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{io, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonKind {
    GtaIm,
    Prox,
}

impl SkeletonKind {
    pub fn spec(self) -> SkeletonSpec {
        match self {
            SkeletonKind::GtaIm => SkeletonSpec::gta_im(),
            SkeletonKind::Prox => SkeletonSpec::prox(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to zero at the last step of the stage.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: String,
    /// Initial (peak) learning rate.
    pub lr: f64,
    pub schedule: LrSchedule,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            name: "adamw".into(),
            lr: a.lr,
            schedule: LrSchedule::Constant,
            warmup_steps: 0,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate for `step` (zero-based) of a `total`-step stage.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = (step - self.warmup_steps) as f64 / span;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub fps: f64,
    pub room: RoomSpec,
    pub speed_range: [f64; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 256,
            test_samples: 32,
            fps: 5.0,
            room: RoomSpec::default(),
            speed_range: BehaviorSpec::new(BehaviorKind::Idle).speed_range,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub skeleton: SkeletonKind,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Optional hard caps on optimizer steps per stage.
    pub stage1_max_steps: Option<usize>,
    pub stage2_max_steps: Option<usize>,
    /// Global gradient-norm clip for stage 2; `None` disables it.
    pub grad_clip: Option<f64>,
    pub eval_runs: usize,
    pub distance: Distance,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 0,
            skeleton: SkeletonKind::GtaIm,
            model: ModelConfig::desk(),
            optimizer: OptimizerConfig {
                lr: 3e-3,
                schedule: LrSchedule::Cosine,
                warmup_steps: 50,
                ..OptimizerConfig::default()
            },
            batch_size: 16,
            stage1_epochs: 125,
            stage2_epochs: 313,
            stage1_max_steps: Some(2000),
            stage2_max_steps: Some(5000),
            grad_clip: Some(1.0),
            eval_runs: 20,
            distance: Distance::L2,
            data: DataConfig::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            stage1_epochs: 1000,
            stage2_epochs: 4000,
            stage1_max_steps: None,
            stage2_max_steps: None,
            ..Self::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.optimizer.name != "adamw" {
            return Err(Error::Config(format!("unknown optimizer {:?}", self.optimizer.name)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        if !(self.data.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn skeleton_spec(&self) -> SkeletonSpec {
        self.skeleton.spec()
    }

    /// Generator settings for `count` samples with every behaviour.
    pub fn dataset_spec(&self, count: usize) -> DatasetSpec {
        DatasetSpec {
            count,
            room: self.data.room.clone(),
            behaviors: BehaviorKind::ALL
                .iter()
                .map(|&kind| BehaviorSpec {
                    kind,
                    speed_range: self.data.speed_range,
                })
                .collect(),
            history_frames: self.model.history_frames,
            future_frames: self.model.future_frames,
            fps: self.data.fps,
        }
    }

    /// Optimizer steps for a stage over `samples` training samples.
    pub fn stage_steps(&self, stage: u8, samples: usize) -> usize {
        let per_epoch = samples.div_ceil(self.batch_size).max(1);
        let (epochs, cap) = match stage {
            1 => (self.stage1_epochs, self.stage1_max_steps),
            _ => (self.stage2_epochs, self.stage2_max_steps),
        };
        let steps = epochs * per_epoch;
        cap.map_or(steps, |c| steps.min(c))
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn with_overrides(&self, text: &str) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            let slot = key
                .split('.')
                .try_fold(&mut tree, |node, part| node.get_mut(part))
                .ok_or_else(|| Error::Config(format!("line {}: unknown key {key:?}", n + 1)))?;
            *slot = parsed;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Profile defaults with the file's overrides applied.
    pub fn load(profile: Profile, path: Option<&Path>) -> Result<Self> {
        let base = Self::for_profile(profile);
        let cfg = match path {
            Some(p) => base.with_overrides(&std::fs::read_to_string(p).map_err(io(p))?)?,
            None => base,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The flat form read by [`RunConfig::with_overrides`].
    pub fn to_flat(&self) -> String {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
            match v {
                Value::Object(map) => {
                    for (k, child) in map {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                other => out.push(format!("{prefix} = {other}")),
            }
        }
        let mut lines = Vec::new();
        walk("", &serde_json::to_value(self).expect("config serializes"), &mut lines);
        lines.join("\n") + "\n"
    }
}
