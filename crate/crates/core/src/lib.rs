//! Multimodal masked autoencoder that treats channel noise as its own
//! modality, plus the synthetic data pipeline and training harness around it.

pub mod constellation;
pub mod model;
pub mod modulation;
pub mod numerics;
pub mod pipeline;
