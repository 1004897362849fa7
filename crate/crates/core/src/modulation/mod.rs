//! Baseband synthesis for ten modulation classes, the AWGN channel, and the
//! signal-to-image conversion used for the time-series modalities.

mod channel;
mod image;
mod resample;
mod scheme;

use num_complex::Complex64;
use thiserror::Error;

pub use channel::{apply_awgn, mean_power, measure_snr, noise_variance, ChannelDraw};
pub use image::{bilinear_resize, min_max_normalize, signal_to_image};
pub use resample::resample_to_base;
pub use scheme::{modulate, random_bits, ModulationScheme};

use crate::numerics::TensorError;

/// Length every signal is brought to before imaging.
pub const BASE_LENGTH: usize = 1024;
pub const SAMPLE_RATE_HZ: f64 = 200_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BasebandSignal {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
    pub scheme: ModulationScheme,
    pub seed: u64,
}

impl BasebandSignal {
    pub fn in_phase(&self) -> Vec<f64> {
        self.samples.iter().map(|c| c.re).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModulationError {
    #[error("unknown modulation scheme {0:?}")]
    UnknownScheme(String),
    #[error("need {needed} payload bits, got {got}")]
    InsufficientBits { needed: usize, got: usize },
    #[error("empty signal")]
    Empty,
    #[error("signal has zero power")]
    ZeroPower,
    #[error("SNR must be finite, got {0}")]
    InvalidSnr(f64),
    #[error("channel output exceeds the representable range")]
    ChannelRange,
    #[error("signal of length {len} is shorter than {min}")]
    TooShort { len: usize, min: usize },
    #[error("expected length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("image side {0} is below 32")]
    ImageSide(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Clean signal at the base length for one dataset sample.
pub fn synthesize_base(scheme: ModulationScheme, seed: u64) -> Result<BasebandSignal, ModulationError> {
    let n = scheme.dataset_symbols();
    let bits = random_bits(n * scheme.bits_per_symbol(), seed);
    resample_to_base(&modulate(scheme, &bits, n, seed)?)
}
