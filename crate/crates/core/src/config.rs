//! Experiment configuration: one serializable record driving generation,
//! training, finetuning and ablations. A run's manifest embeds the config
//! and its hash so the run can be reproduced from the manifest alone.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::train::{OptimConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Recommended truncation range; the routing stays usefully sparse here.
pub const TAU_RECOMMENDED: (f64, f64) = (1.2, 1.7);
/// Recommended type-space dimensions.
pub const D_TYPE_RECOMMENDED: (usize, usize) = (20, 50);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Variables per fuzzy Boolean function.
    pub n_vars: usize,
    pub n_pretrain_tasks: usize,
    pub n_adapt_tasks: usize,
    /// Samples per dataset (shared across that dataset's tasks).
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Iteration counts for the anytime-inference sweep.
    pub n_i_sweep: Vec<usize>,
    /// Added-function counts for the capacity-extension sweep.
    pub added_functions: Vec<usize>,
    /// Seeds averaged over in finetuning sweeps.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneSettings,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl ExperimentConfig {
    /// Desk-scale configuration: published counts (scripts, iterations,
    /// LOCs, functions, tau, type dimension, head layout, epochs, batch,
    /// learning rates) with width 64 and a 16384-sample dataset so the
    /// whole pipeline runs on a laptop CPU.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            task: TaskConfig {
                n_vars: 5,
                n_pretrain_tasks: 8,
                n_adapt_tasks: 4,
                num_samples: 16384,
            },
            train: TrainConfig {
                epochs: 20,
                batch_size: 128,
                optim: OptimConfig {
                    lr: 0.006,
                    ..Default::default()
                },
                seed: 0,
                eval_batch: 512,
            },
            finetune: FinetuneSettings {
                epochs: 3,
                lr: 0.05,
            },
            ablation: AblationConfig {
                n_i_sweep: vec![1, 2, 3, 4],
                added_functions: vec![0, 1, 2],
                seeds: vec![1, 2, 3],
            },
        }
    }

    /// The published full-scale setting (20+10 tasks of 5 variables,
    /// 163840 samples, width 128). Provided for reference; the desk
    /// configuration is the tested default.
    pub fn paper_scale() -> Self {
        let mut cfg = Self::desk_default();
        cfg.model.d_model = 128;
        cfg.model.d_cond = 128;
        cfg.model.n_cls = 20;
        cfg.task.n_pretrain_tasks = 20;
        cfg.task.n_adapt_tasks = 10;
        cfg.task.num_samples = 163_840;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.task.n_vars == 0 || self.task.n_pretrain_tasks == 0 {
            return Err(ConfigError::Invalid(
                "need at least one variable and one pretraining task".into(),
            ));
        }
        if self.task.n_vars != self.model.n_inputs {
            return Err(ConfigError::Invalid(format!(
                "task.n_vars = {} but model.n_inputs = {}",
                self.task.n_vars, self.model.n_inputs
            )));
        }
        if self.ablation.n_i_sweep.iter().any(|&n| n == 0) {
            return Err(ConfigError::Invalid("n_i sweep values must be >= 1".into()));
        }
        Ok(())
    }

    /// Guidance-only warnings for settings outside the ranges that worked
    /// well in practice.
    pub fn range_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        let (lo, hi) = TAU_RECOMMENDED;
        if self.model.tau < lo || self.model.tau > hi {
            warnings.push(format!(
                "tau = {} is outside the recommended [{lo}, {hi}] sweep range",
                self.model.tau
            ));
        }
        let (dlo, dhi) = D_TYPE_RECOMMENDED;
        if self.model.d_type < dlo || self.model.d_type > dhi {
            warnings.push(format!(
                "d_type = {} is outside the recommended [{dlo}, {dhi}] range",
                self.model.d_type
            ));
        }
        warnings
    }

    /// Stable hash of the serialized config (FNV-1a, hex).
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}
