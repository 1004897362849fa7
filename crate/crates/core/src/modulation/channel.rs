use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};

use super::{BasebandSignal, ModulationError};
use crate::numerics::SeedKey;

/// Channel samples live on a 2^-40 fixed-point lattice so that
/// `clean + noise` and `noisy - clean` are exact in `f64`.
const LATTICE: f64 = 1_099_511_627_776.0; // 2^40
const LATTICE_LIMIT: f64 = 4096.0;

fn snap(x: f64) -> f64 {
    (x * LATTICE).round() / LATTICE
}

fn snap_c(c: Complex64) -> Complex64 {
    Complex64::new(snap(c.re), snap(c.im))
}

/// One AWGN realization: `noisy = clean + noise` holds exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDraw {
    pub snr_db: f64,
    pub clean: BasebandSignal,
    pub noisy: BasebandSignal,
    pub noise: Vec<Complex64>,
}

pub fn mean_power(samples: &[Complex64]) -> f64 {
    samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64
}

/// Noise variance for a requested SNR: P_s / 10^(snr/10).
pub fn noise_variance(signal_power: f64, snr_db: f64) -> f64 {
    signal_power / 10f64.powf(snr_db / 10.0)
}

/// Adds complex white Gaussian noise at `snr_db`, split evenly between the
/// in-phase and quadrature parts. `+inf` dB adds no noise.
pub fn apply_awgn(signal: &BasebandSignal, snr_db: f64, seed: u64) -> Result<ChannelDraw, ModulationError> {
    if signal.samples.is_empty() {
        return Err(ModulationError::Empty);
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(ModulationError::InvalidSnr(snr_db));
    }
    let clean_samples: Vec<Complex64> = signal.samples.iter().map(|&c| snap_c(c)).collect();
    let ps = mean_power(&clean_samples);
    if !(ps > 0.0 && ps.is_finite()) {
        return Err(ModulationError::ZeroPower);
    }
    let sigma = (noise_variance(ps, snr_db) / 2.0).sqrt();
    let mut rng = SeedKey::new(seed).named("awgn").rng();
    let mut noise = Vec::with_capacity(clean_samples.len());
    let mut noisy = Vec::with_capacity(clean_samples.len());
    for &c in &clean_samples {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        let n = snap_c(Complex64::new(sigma * re, sigma * im));
        let y = c + n;
        if y.re.abs().max(y.im.abs()) >= LATTICE_LIMIT {
            return Err(ModulationError::ChannelRange);
        }
        noise.push(n);
        noisy.push(y);
    }
    let clean = BasebandSignal {
        samples: clean_samples,
        ..signal.clone()
    };
    Ok(ChannelDraw {
        snr_db,
        noisy: BasebandSignal {
            samples: noisy,
            ..signal.clone()
        },
        clean,
        noise,
    })
}

/// 10 log10(P_clean / P_(noisy - clean)). Identical inputs give `+inf`.
pub fn measure_snr(clean: &[Complex64], noisy: &[Complex64]) -> Result<f64, ModulationError> {
    if clean.len() != noisy.len() {
        return Err(ModulationError::LengthMismatch {
            expected: clean.len(),
            got: noisy.len(),
        });
    }
    if clean.is_empty() {
        return Err(ModulationError::Empty);
    }
    let pc = mean_power(clean);
    let pn = clean.iter().zip(noisy).map(|(c, y)| (y - c).norm_sqr()).sum::<f64>() / clean.len() as f64;
    if pn == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (pc / pn).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulation::{modulate, random_bits, ModulationScheme, SAMPLE_RATE_HZ};

    fn unit_signal(n: usize) -> BasebandSignal {
        BasebandSignal {
            samples: vec![Complex64::new(1.0, 0.0); n],
            sample_rate_hz: SAMPLE_RATE_HZ,
            scheme: ModulationScheme::Bpsk,
            seed: 0,
        }
    }

    #[test]
    fn variance_examples() {
        assert_eq!(noise_variance(1.0, 0.0), 1.0);
        assert!((noise_variance(1.0, 10.0) - 0.1).abs() < 1e-15);
        assert!((noise_variance(1.0, -10.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn additivity_is_exact() {
        let bits = random_bits(2048, 5);
        let sig = modulate(ModulationScheme::Qam16, &bits, 512, 5).unwrap();
        let draw = apply_awgn(&sig, -3.0, 9).unwrap();
        for ((c, y), n) in draw.clean.samples.iter().zip(&draw.noisy.samples).zip(&draw.noise) {
            assert_eq!(c + n, *y);
            assert_eq!(y - c, *n);
        }
    }

    #[test]
    fn deterministic() {
        let sig = unit_signal(256);
        assert_eq!(apply_awgn(&sig, 3.0, 1).unwrap(), apply_awgn(&sig, 3.0, 1).unwrap());
        assert_ne!(apply_awgn(&sig, 3.0, 1).unwrap().noise, apply_awgn(&sig, 3.0, 2).unwrap().noise);
    }

    #[test]
    fn zero_power_rejected() {
        let mut sig = unit_signal(4);
        sig.samples.iter_mut().for_each(|s| *s = Complex64::new(0.0, 0.0));
        assert!(matches!(apply_awgn(&sig, 0.0, 0), Err(ModulationError::ZeroPower)));
    }

    #[test]
    fn infinite_snr_is_noiseless() {
        let sig = unit_signal(16);
        let d = apply_awgn(&sig, f64::INFINITY, 3).unwrap();
        assert_eq!(d.noisy.samples, d.clean.samples);
        assert!(d.noise.iter().all(|n| n.norm() == 0.0));
        assert!(apply_awgn(&sig, f64::NAN, 3).is_err());
        assert!(apply_awgn(&sig, f64::NEG_INFINITY, 3).is_err());
    }

    #[test]
    fn measure_known_ratio() {
        let clean: Vec<Complex64> = (0..8).map(|i| Complex64::new(i as f64 - 3.5, 1.0)).collect();
        let scale = 10f64.powf(-0.5);
        let noisy: Vec<Complex64> = clean.iter().map(|c| c + c * scale).collect();
        assert!((measure_snr(&clean, &noisy).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(measure_snr(&clean, &clean).unwrap(), f64::INFINITY);
        assert!(measure_snr(&clean, &clean[..3]).is_err());
    }
}
