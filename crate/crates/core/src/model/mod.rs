//! The multimodal masked autoencoder and its classification head.

mod checkpoint;
mod layers;
mod loss;
mod mask;
mod network;
mod patch;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::TensorError;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use loss::{masked_mse, pretrain_loss, LossBreakdown};
pub use mask::{sample_mask, MaskPlan};
pub use network::{DenoMAE, Denoised, ParamGroup, PretrainForward, Visibility};
pub use patch::{patchify, unpatchify};

/// One aligned view of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "noisy_const")]
    NoisyConstellation,
    #[serde(rename = "clean_const")]
    CleanConstellation,
    #[serde(rename = "noisy_signal")]
    NoisySignal,
    #[serde(rename = "clean_signal")]
    CleanSignal,
    #[serde(rename = "noise")]
    Noise,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::NoisyConstellation,
        Modality::CleanConstellation,
        Modality::NoisySignal,
        Modality::CleanSignal,
        Modality::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::NoisyConstellation => "noisy_const",
            Modality::CleanConstellation => "clean_const",
            Modality::NoisySignal => "noisy_signal",
            Modality::CleanSignal => "clean_signal",
            Modality::Noise => "noise",
        }
    }

    /// Available at inference time without knowing the transmitted signal.
    pub fn is_observed(self) -> bool {
        matches!(self, Modality::NoisyConstellation | Modality::NoisySignal)
    }

    /// Nested subsets used by the modality ablation, smallest first.
    pub fn ablation_subsets() -> Vec<Vec<Modality>> {
        use Modality::*;
        let order = [CleanConstellation, NoisyConstellation, CleanSignal, NoisySignal, Noise];
        (1..=order.len()).map(|k| order[..k].to_vec()).collect()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown modality {s:?}")))
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("modality slot {slot} out of range for {count} modalities")]
    ModalitySlot { slot: usize, count: usize },
    #[error("expected {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("image shape {got:?} does not match {expected:?}")]
    ImageShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("every modality is fully masked")]
    NothingVisible,
    #[error("label {label} outside {classes} classes")]
    Label { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 512,
            dropout: 0.5,
            classes: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoMAEConfig {
    /// Modalities in canonical order; their count is the modality count.
    pub modalities: Vec<Modality>,
    pub image_side: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub modality_weights: Vec<f64>,
    pub classifier: ClassifierConfig,
    /// Draw one mask per sample and reuse it for every modality.
    pub shared_mask: bool,
    /// Keep embedders and encoder fixed during fine-tuning.
    pub freeze_encoder: bool,
}

impl DenoMAEConfig {
    pub fn paper() -> Self {
        DenoMAEConfig {
            modalities: Modality::ALL.to_vec(),
            image_side: 224,
            channels: 3,
            patch_size: 16,
            d_model: 768,
            encoder_layers: 12,
            decoder_layers: 4,
            heads: 12,
            mlp_ratio: 4,
            mask_ratio: 0.75,
            modality_weights: vec![1.0; 5],
            classifier: ClassifierConfig::default(),
            shared_mask: false,
            freeze_encoder: false,
        }
    }

    pub fn desk() -> Self {
        DenoMAEConfig {
            image_side: 32,
            patch_size: 8,
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 1,
            heads: 4,
            ..Self::paper()
        }
    }

    /// Same config restricted to `modalities` (unit weights).
    pub fn with_modalities(mut self, modalities: &[Modality]) -> Self {
        let mut m = modalities.to_vec();
        m.sort();
        self.modality_weights = vec![1.0; m.len()];
        self.modalities = m;
        self
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_side, self.image_side]
    }

    pub fn slot(&self, m: Modality) -> Option<usize> {
        self.modalities.iter().position(|&x| x == m)
    }

    /// Embedder slot used for classification: the noisy constellation when
    /// present, otherwise the first modality.
    pub fn classify_slot(&self) -> usize {
        self.slot(Modality::NoisyConstellation).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.modalities.is_empty() {
            return bad("at least one modality required".into());
        }
        if self.modalities.windows(2).any(|w| w[0] >= w[1]) {
            return bad("modalities must be distinct and in canonical order".into());
        }
        if self.modality_weights.len() != self.modalities.len() {
            return bad(format!(
                "{} weights for {} modalities",
                self.modality_weights.len(),
                self.modalities.len()
            ));
        }
        if !self.modality_weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
            return bad("modality weights must be positive".into());
        }
        if self.patch_size == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.num_patches() < 2 {
            return bad("at least two patches required".into());
        }
        if self.channels == 0 || self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.mask_count() == 0 || self.mask_count() == self.num_patches() {
            return bad("mask ratio leaves no masked or no visible patch".into());
        }
        let c = &self.classifier;
        if c.hidden == 0 || c.classes < 2 || !(0.0..1.0).contains(&c.dropout) {
            return bad("classifier needs hidden > 0, classes >= 2, dropout in [0, 1)".into());
        }
        Ok(())
    }

    /// Masked patches per modality during pretraining.
    pub fn mask_count(&self) -> usize {
        (self.mask_ratio * self.num_patches() as f64).floor() as usize
    }
}
