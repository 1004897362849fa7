//! Dataset generation, training loops and the evaluation protocols.

mod config;
mod dataset;
mod eval;
mod metrics;
mod train;

use std::path::Path;

use thiserror::Error;

use crate::constellation::RenderError;
use crate::model::{CheckpointError, ModelError};
use crate::modulation::ModulationError;
use crate::numerics::{OptimError, TensorError};

pub use config::{DataConfig, OptimizerKind, RenderConfig, RunConfig, TrainConfig};
pub use dataset::{
    assert_disjoint, generate_dataset, generate_samples, load_dataset, synthesize_sample, GenSpec, Manifest, ManifestRecord,
    ModalitySample, Split, MANIFEST_VERSION,
};
pub use eval::{
    evaluate_extrapolation, evaluate_snr_sweep, image_mse, run_modality_ablation, AblationReport, AblationRow, ExtrapolationReport,
    ExtrapolationRow, SweepReport, SweepRow, TriptychOutput, ABLATION_REFERENCE, SWEEP_REFERENCE,
};
pub use metrics::{MetricEvent, MetricRecord, MetricsLog};
pub use train::{accuracy, finetune, pretrain, EpochAccuracy, FinetuneOutcome, PretrainOutcome, TrainState};

/// Coarse failure class, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (sample seeds {seeds:?}): {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        seeds: Vec<u64>,
        detail: String,
    },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Modulation(#[from] ModulationError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            PipelineError::Config(_) | PipelineError::Optim(_) => ErrorCategory::Config,
            PipelineError::NonFinite { .. } => ErrorCategory::Numeric,
            PipelineError::Io { .. } => ErrorCategory::Io,
            PipelineError::Checkpoint(CheckpointError::Io { .. }) => ErrorCategory::Io,
            PipelineError::Checkpoint(CheckpointError::Layout(_)) => ErrorCategory::Config,
            PipelineError::Model(ModelError::Config(_)) => ErrorCategory::Config,
            PipelineError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
