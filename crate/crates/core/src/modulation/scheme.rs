use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BasebandSignal, ModulationError, SAMPLE_RATE_HZ};
use crate::numerics::SeedKey;

/// The ten modulation classes. Canonical labels are lower-case ASCII.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModulationScheme {
    #[serde(rename = "bpsk")]
    Bpsk,
    #[serde(rename = "qpsk")]
    Qpsk,
    #[serde(rename = "oqpsk")]
    Oqpsk,
    #[serde(rename = "8psk")]
    Psk8,
    #[serde(rename = "16qam")]
    Qam16,
    #[serde(rename = "64qam")]
    Qam64,
    #[serde(rename = "4pam")]
    Pam4,
    #[serde(rename = "4fsk")]
    Fsk4,
    #[serde(rename = "cpfsk")]
    Cpfsk,
    #[serde(rename = "gmsk")]
    Gmsk,
}

use ModulationScheme::*;

/// OQPSK: samples per symbol; the Q rail lags by half of this.
const OQPSK_SPS: usize = 4;
const FSK_SPS: usize = 8;
const FSK4_INDEX: f64 = 0.5;
const CPFSK_INDEX: f64 = 0.75;
const GMSK_SPS: usize = 8;
const GMSK_BT: f64 = 0.3;
const GMSK_SPAN_SYMBOLS: usize = 4;
/// Guard samples kept on each side of the GMSK symbol span.
const GMSK_GUARD: usize = 2;

impl ModulationScheme {
    pub const ALL: [ModulationScheme; 10] = [Bpsk, Qpsk, Oqpsk, Psk8, Qam16, Qam64, Pam4, Fsk4, Cpfsk, Gmsk];

    pub fn name(self) -> &'static str {
        match self {
            Bpsk => "bpsk",
            Qpsk => "qpsk",
            Oqpsk => "oqpsk",
            Psk8 => "8psk",
            Qam16 => "16qam",
            Qam64 => "64qam",
            Pam4 => "4pam",
            Fsk4 => "4fsk",
            Cpfsk => "cpfsk",
            Gmsk => "gmsk",
        }
    }

    /// Position in [`ModulationScheme::ALL`].
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("listed")
    }

    pub fn bits_per_symbol(self) -> usize {
        match self {
            Bpsk | Cpfsk | Gmsk => 1,
            Qpsk | Oqpsk | Pam4 | Fsk4 => 2,
            Psk8 => 3,
            Qam16 => 4,
            Qam64 => 6,
        }
    }

    pub fn samples_per_symbol(self) -> usize {
        match self {
            Oqpsk => OQPSK_SPS,
            Fsk4 | Cpfsk => FSK_SPS,
            Gmsk => GMSK_SPS,
            _ => 1,
        }
    }

    /// Number of symbols the dataset generator modulates. Every scheme but
    /// GMSK lands exactly on 1024 samples; GMSK is produced at its native
    /// 8196 samples and decimated afterwards.
    pub fn dataset_symbols(self) -> usize {
        match self {
            Gmsk => 1024,
            s => super::BASE_LENGTH / s.samples_per_symbol(),
        }
    }

    /// Output length of [`modulate`] for `n_symbols`.
    pub fn native_length(self, n_symbols: usize) -> usize {
        match self {
            Gmsk => n_symbols * GMSK_SPS + 2 * GMSK_GUARD,
            s => n_symbols * s.samples_per_symbol(),
        }
    }

    /// Symbol alphabet at unit average power. For the continuous-phase
    /// schemes this is the set of per-symbol phase rotations.
    pub fn alphabet(self) -> Vec<Complex64> {
        let bits = self.bits_per_symbol();
        match self {
            Cpfsk | Gmsk | Fsk4 => {
                let h = match self {
                    Fsk4 => FSK4_INDEX,
                    Cpfsk => CPFSK_INDEX,
                    _ => 0.5,
                };
                let levels: Vec<f64> = match self {
                    Fsk4 => vec![-3.0, -1.0, 1.0, 3.0],
                    _ => vec![-1.0, 1.0],
                };
                levels.iter().map(|d| Complex64::from_polar(1.0, PI * h * d)).collect()
            }
            Oqpsk => Qpsk.alphabet(),
            _ => (0..1usize << bits)
                .map(|v| {
                    let b: Vec<u8> = (0..bits).map(|k| ((v >> (bits - 1 - k)) & 1) as u8).collect();
                    map_linear(self, &b)
                })
                .collect(),
        }
    }
}

impl fmt::Display for ModulationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationScheme {
    type Err = ModulationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == lower)
            .ok_or_else(|| ModulationError::UnknownScheme(s.to_string()))
    }
}

fn bits_to_uint(bits: &[u8]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | usize::from(b & 1))
}

/// Inverse Gray code: position of a Gray-coded word in the natural order.
fn gray_rank(mut g: usize) -> usize {
    let mut n = 0;
    while g != 0 {
        n ^= g;
        g >>= 1;
    }
    n
}

/// Gray-coded PAM level in {-(M-1), ..., M-1} for `bits.len()` bits.
fn pam_level(bits: &[u8]) -> f64 {
    let m = 1usize << bits.len();
    let rank = gray_rank(bits_to_uint(bits));
    2.0 * rank as f64 - (m as f64 - 1.0)
}

/// Maps one symbol's bits for the memoryless schemes.
///
/// Conventions: BPSK b -> 1 - 2b. QPSK (b0, b1) -> ((1 - 2b0) + j(1 - 2b1))/sqrt(2),
/// so 00 -> (1 + j)/sqrt(2). 8PSK places Gray word g at angle 2*pi*rank(g)/8.
/// QAM and PAM use Gray-coded levels per axis (I from the leading bits).
fn map_linear(scheme: ModulationScheme, bits: &[u8]) -> Complex64 {
    match scheme {
        Bpsk => Complex64::new(1.0 - 2.0 * f64::from(bits[0]), 0.0),
        Qpsk | Oqpsk => Complex64::new(
            (1.0 - 2.0 * f64::from(bits[0])) * FRAC_1_SQRT_2,
            (1.0 - 2.0 * f64::from(bits[1])) * FRAC_1_SQRT_2,
        ),
        Psk8 => {
            let k = gray_rank(bits_to_uint(bits));
            Complex64::from_polar(1.0, 2.0 * PI * k as f64 / 8.0)
        }
        Qam16 => Complex64::new(pam_level(&bits[..2]), pam_level(&bits[2..])) / 10f64.sqrt(),
        Qam64 => Complex64::new(pam_level(&bits[..3]), pam_level(&bits[3..])) / 42f64.sqrt(),
        Pam4 => Complex64::new(pam_level(bits) / 5f64.sqrt(), 0.0),
        Fsk4 | Cpfsk | Gmsk => unreachable!("continuous-phase schemes are not memoryless"),
    }
}

/// Uniform random payload bits.
pub fn random_bits(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = SeedKey::new(seed).named("payload").rng();
    (0..n).map(|_| rng.random::<bool>() as u8).collect()
}

fn normalize_power(samples: &mut [Complex64]) {
    let p = samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64;
    if p > 0.0 {
        let g = 1.0 / p.sqrt();
        samples.iter_mut().for_each(|s| *s *= g);
    }
}

fn continuous_phase(freqs: impl Iterator<Item = f64>) -> Vec<Complex64> {
    let mut phase = 0.0f64;
    freqs
        .map(|f| {
            let s = Complex64::from_polar(1.0, phase);
            phase = (phase + f).rem_euclid(2.0 * PI);
            s
        })
        .collect()
}

fn gaussian_taps() -> Vec<f64> {
    let half = (GMSK_SPAN_SYMBOLS * GMSK_SPS / 2) as isize;
    let sigma = (2f64.ln()).sqrt() / (2.0 * PI * GMSK_BT) * GMSK_SPS as f64;
    let taps: Vec<f64> = (-half..=half)
        .map(|n| (-(n as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Synthesizes a unit-average-power baseband sequence.
///
/// Linear schemes emit one sample per symbol. OQPSK uses half-sine pulses
/// with the Q rail delayed by half a symbol (cyclically, so every sample sits
/// on the unit circle). 4FSK and CPFSK are continuous-phase with modulation
/// indices 0.5 and 0.75 at 8 samples per symbol. GMSK (BT = 0.3, h = 0.5,
/// 8 samples per symbol) keeps two guard samples on each side of the symbol
/// span, so 1024 symbols give the native 8196 samples.
pub fn modulate(scheme: ModulationScheme, bits: &[u8], n_symbols: usize, seed: u64) -> Result<BasebandSignal, ModulationError> {
    let bps = scheme.bits_per_symbol();
    let needed = n_symbols * bps;
    if n_symbols == 0 {
        return Err(ModulationError::Empty);
    }
    if bits.len() < needed {
        return Err(ModulationError::InsufficientBits { needed, got: bits.len() });
    }
    let symbols: Vec<&[u8]> = bits[..needed].chunks(bps).collect();
    let mut samples: Vec<Complex64> = match scheme {
        Bpsk | Qpsk | Psk8 | Qam16 | Qam64 | Pam4 => symbols.iter().map(|b| map_linear(scheme, b)).collect(),
        Oqpsk => {
            let sps = OQPSK_SPS;
            let half = sps / 2;
            let pulse: Vec<f64> = (0..sps).map(|n| (PI * (n as f64 + 0.5) / sps as f64).sin()).collect();
            let len = n_symbols * sps;
            let mut out = vec![Complex64::new(0.0, 0.0); len];
            for (k, b) in symbols.iter().enumerate() {
                let (ai, aq) = (1.0 - 2.0 * f64::from(b[0]), 1.0 - 2.0 * f64::from(b[1]));
                for (n, &p) in pulse.iter().enumerate() {
                    out[k * sps + n].re += ai * p;
                    out[(k * sps + n + half) % len].im += aq * p;
                }
            }
            out
        }
        Fsk4 => {
            let step = PI * FSK4_INDEX / FSK_SPS as f64;
            continuous_phase(symbols.iter().flat_map(|b| std::iter::repeat_n(pam_level(b) * step, FSK_SPS)))
        }
        Cpfsk => {
            let step = PI * CPFSK_INDEX / FSK_SPS as f64;
            continuous_phase(
                symbols
                    .iter()
                    .flat_map(|b| std::iter::repeat_n((1.0 - 2.0 * f64::from(b[0])) * step, FSK_SPS)),
            )
        }
        Gmsk => {
            let nrz: Vec<f64> = symbols
                .iter()
                .flat_map(|b| std::iter::repeat_n(1.0 - 2.0 * f64::from(b[0]), GMSK_SPS))
                .collect();
            let taps = gaussian_taps();
            let full_len = nrz.len() + taps.len() - 1;
            let start = (taps.len() - 1) / 2 - GMSK_GUARD;
            let out_len = scheme.native_length(n_symbols);
            let step = PI * 0.5 / GMSK_SPS as f64;
            let freq = (start..start + out_len).map(|n| {
                debug_assert!(n < full_len);
                let lo = n.saturating_sub(taps.len() - 1);
                let hi = n.min(nrz.len() - 1);
                (lo..=hi).map(|k| nrz[k] * taps[n - k]).sum::<f64>() * step
            });
            continuous_phase(freq)
        }
    };
    normalize_power(&mut samples);
    Ok(BasebandSignal {
        samples,
        sample_rate_hz: SAMPLE_RATE_HZ,
        scheme,
        seed,
    })
}
