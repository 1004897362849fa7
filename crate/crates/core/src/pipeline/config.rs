use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::constellation::{ClipPolicy, DecayConfig, GridSpec};
use crate::model::DenoMAEConfig;
use crate::modulation::ModulationScheme;
use crate::numerics::{Adam, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Write a checkpoint every this many epochs (0 disables intermediate
    /// checkpoints; the final one is always written when a directory is set).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PipelineError::Config(format!("{what}: epochs and batch size must be positive")));
        }
        self.adamw()?;
        Ok(())
    }

    /// The optimizer as an AdamW instance (Adam is AdamW without decay).
    pub fn adamw(&self) -> Result<AdamW> {
        Ok(match self.optimizer {
            OptimizerKind::Adamw => {
                let d = AdamW::with_lr(self.lr)?;
                AdamW::new(self.lr, d.beta1, d.beta2, d.eps, self.weight_decay)?
            }
            OptimizerKind::Adam => Adam::with_lr(self.lr)?.as_adamw(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub extent: f64,
    pub clip: ClipPolicy,
    pub decay: DecayConfig,
}

impl Default for RenderConfig {
    fn default() -> Self {
        let g = GridSpec::default();
        RenderConfig {
            extent: g.extent,
            clip: g.clip,
            decay: DecayConfig::default(),
        }
    }
}

impl RenderConfig {
    pub fn grid(&self, resolution: usize) -> GridSpec {
        GridSpec {
            extent: self.extent,
            resolution,
            clip: self.clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub pretrain_samples: usize,
    pub finetune_train_samples: usize,
    pub finetune_test_samples: usize,
    pub snr_min: f64,
    pub snr_max: f64,
    pub schemes: Vec<ModulationScheme>,
    pub render: RenderConfig,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_min.is_finite() && self.snr_max.is_finite() && self.snr_min <= self.snr_max) {
            return Err(PipelineError::Config(format!(
                "invalid SNR range [{}, {}]",
                self.snr_min, self.snr_max
            )));
        }
        if self.schemes.is_empty() {
            return Err(PipelineError::Config("no modulation schemes selected".into()));
        }
        self.render.decay.validate()?;
        self.render.grid(8).validate()?;
        Ok(())
    }
}

/// Everything a run needs: model, data and both training phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: DenoMAEConfig,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn paper() -> Self {
        RunConfig {
            model: DenoMAEConfig::paper(),
            data: DataConfig {
                pretrain_samples: 10_000,
                finetune_train_samples: 1_000,
                finetune_test_samples: 1_000,
                snr_min: -10.0,
                snr_max: 10.0,
                schemes: ModulationScheme::ALL.to_vec(),
                render: RenderConfig::default(),
            },
            pretrain: TrainConfig {
                optimizer: OptimizerKind::Adamw,
                lr: 1e-4,
                weight_decay: 0.01,
                epochs: 100,
                batch_size: 64,
                checkpoint_every: 10,
            },
            finetune: TrainConfig {
                optimizer: OptimizerKind::Adam,
                lr: 1e-4,
                weight_decay: 0.0,
                epochs: 150,
                batch_size: 32,
                checkpoint_every: 0,
            },
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        let paper = Self::paper();
        RunConfig {
            model: DenoMAEConfig::desk(),
            data: DataConfig {
                pretrain_samples: 512,
                finetune_train_samples: 256,
                finetune_test_samples: 128,
                ..paper.data
            },
            pretrain: TrainConfig {
                lr: 1e-3,
                epochs: 30,
                batch_size: 16,
                checkpoint_every: 5,
                ..paper.pretrain
            },
            finetune: TrainConfig {
                lr: 1e-3,
                epochs: 150,
                batch_size: 32,
                ..paper.finetune
            },
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.pretrain.validate("pretrain")?;
        self.finetune.validate("finetune")?;
        if self.model.image_side < 32 {
            return Err(PipelineError::Config("image side must be at least 32".into()));
        }
        Ok(())
    }
}
