use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "denomae",
    version,
    about = "Multimodal masked-autoencoder pretraining and modulation classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the pretraining and fine-tuning datasets
    Gen(GenArgs),
    /// Pretrain the multimodal autoencoder
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier on a pretrained (or freshly initialized) encoder
    Finetune(FinetuneArgs),
    /// Classification accuracy per SNR on freshly generated test sets
    Eval(EvalArgs),
    /// Denoise constellations at SNRs below the training range
    Denoise(DenoiseArgs),
    /// Pretrain and fine-tune once per nested modality subset
    Ablate(AblateArgs),
}

/// Flags shared by every subcommand. Precedence: preset, then the config
/// file, then individual flags.
#[derive(Debug, Args)]
pub struct Common {
    /// Run directory; every output of the command goes here
    #[arg(long, short)]
    pub out: PathBuf,
    /// Base preset
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
    pub preset: String,
    /// JSON run configuration; fields it leaves out keep their preset values [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed [default: from config]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace the outputs of an existing run directory instead of refusing [default: off]
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Training epochs [default: from config]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate [default: from config]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size [default: from config]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Write a checkpoint every N epochs, 0 for only the final one [default: from config]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Which split to generate
    #[arg(long, default_value = "all", value_parser = ["all", "pretrain", "finetune-train", "finetune-test"])]
    pub split: String,
    /// Samples per generated split [default: from config]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Lowest SNR in dB [default: from config]
    #[arg(long, allow_negative_numbers = true)]
    pub snr_min: Option<f64>,
    /// Highest SNR in dB [default: from config]
    #[arg(long, allow_negative_numbers = true)]
    pub snr_max: Option<f64>,
    /// Comma-separated modulation schemes, e.g. bpsk,qpsk,16qam [default: from config]
    #[arg(long)]
    pub schemes: Option<String>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pretraining dataset (manifest or its directory)
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from a pretraining checkpoint [default: none]
    #[arg(long, conflicts_with = "overwrite")]
    pub resume: Option<PathBuf>,
    /// Comma-separated modalities to pretrain on [default: from config]
    #[arg(long)]
    pub modalities: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    /// Fine-tuning training set
    #[arg(long)]
    pub train: PathBuf,
    /// Fine-tuning test set
    #[arg(long)]
    pub test: PathBuf,
    /// Pretraining checkpoint to start from [default: none]
    #[arg(long, required_unless_present = "from_scratch")]
    pub checkpoint: Option<PathBuf>,
    /// Start from random weights instead of a checkpoint [default: off]
    #[arg(long, conflicts_with = "checkpoint")]
    pub from_scratch: bool,
    /// Train only the classification head [default: off]
    #[arg(long)]
    pub freeze_encoder: bool,
    #[command(flatten)]
    pub train_flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Classifier checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// SNR list in dB: comma-separated values or an integer range a..b
    #[arg(long, default_value = "-10,0,10", allow_hyphen_values = true)]
    pub snrs: String,
    /// Fresh test samples per SNR
    #[arg(long, default_value_t = 128)]
    pub samples_per_snr: usize,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pretraining checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// SNR list in dB: comma-separated values or an integer range a..b
    #[arg(long, default_value = "-11..-20", allow_hyphen_values = true)]
    pub snrs: String,
    /// Fresh samples per SNR
    #[arg(long, default_value_t = 64)]
    pub samples_per_snr: usize,
    /// Fraction of observed patches hidden from the encoder
    #[arg(long, default_value_t = 0.0)]
    pub observed_ratio: f64,
    /// Noisy / denoised / clean PPM strips written per SNR
    #[arg(long, default_value_t = 2)]
    pub triptychs: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pretraining dataset
    #[arg(long)]
    pub pretrain_data: PathBuf,
    /// Fine-tuning training set
    #[arg(long)]
    pub train: PathBuf,
    /// Fine-tuning test set
    #[arg(long)]
    pub test: PathBuf,
}
