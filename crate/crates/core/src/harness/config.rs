use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_MLM_RATE;
use crate::error::{Error, Result};
use crate::graph::CorruptionConfig;
use crate::model::ModelConfig;
use crate::objectives::LossWeights;

fn default_mlm_rate() -> f64 {
    DEFAULT_MLM_RATE
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSchedule {
    pub steps: usize,
    /// Documents per optimizer step. Gradients are accumulated one
    /// document at a time, so any size fits in memory.
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_proportion: f64,
    #[serde(default = "default_mlm_rate")]
    pub mlm_rate: f64,
    /// Write `step-<n>/` checkpoints every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_proportion: f64,
    /// Accepted for symmetry with pre-training and ignored with a warning.
    #[serde(default)]
    pub corruption: Option<CorruptionConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Unlabeled corpus for pre-training.
    #[serde(default)]
    pub pretrain: Option<PathBuf>,
    /// Labeled split for fine-tuning.
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub lowercase: bool,
}

/// One recipe: shared model and loss settings plus a schedule per phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub corruption: CorruptionConfig,
    #[serde(default)]
    pub pretrain: Option<PretrainSchedule>,
    #[serde(default)]
    pub finetune: Option<FinetuneSchedule>,
    pub data: DataConfig,
}

fn check_schedule(phase: &str, batch: usize, lr: f64, warmup: f64) -> Result<()> {
    if batch == 0 {
        return Err(Error::Config(format!("{phase}.batch_size must be positive")));
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!("{phase}.learning_rate must be positive")));
    }
    if !(0.0..1.0).contains(&warmup) {
        return Err(Error::Config(format!("{phase}.warmup_proportion {warmup} outside [0, 1)")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.corruption.validate()?;
        if let Some(p) = &self.pretrain {
            check_schedule("pretrain", p.batch_size, p.learning_rate, p.warmup_proportion)?;
            if !(0.0..=1.0).contains(&p.mlm_rate) {
                return Err(Error::Config(format!("pretrain.mlm_rate {} outside [0, 1]", p.mlm_rate)));
            }
        }
        if let Some(f) = &self.finetune {
            check_schedule("finetune", f.batch_size, f.learning_rate, f.warmup_proportion)?;
        }
        Ok(())
    }

    pub fn pretrain_schedule(&self) -> Result<&PretrainSchedule> {
        self.pretrain
            .as_ref()
            .ok_or_else(|| Error::Config("the config has no `pretrain` section".into()))
    }

    pub fn finetune_schedule(&self) -> Result<&FinetuneSchedule> {
        self.finetune
            .as_ref()
            .ok_or_else(|| Error::Config("the config has no `finetune` section".into()))
    }
}

/// Learning rate at `step` (0-based) under linear warm-up then constant.
pub fn warmup_lr(base: f64, warmup_proportion: f64, total_steps: usize, step: usize) -> f64 {
    let warm = (warmup_proportion * total_steps as f64).ceil() as usize;
    if warm == 0 || step >= warm {
        base
    } else {
        base * step as f64 / warm as f64
    }
}
