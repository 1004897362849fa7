use std::f64::consts::PI;

use num_complex::Complex64;

use super::{BasebandSignal, ModulationError, BASE_LENGTH};

/// Windowed-sinc low-pass (Hamming) with unit DC gain.
fn lowpass_taps(factor: f64) -> Vec<f64> {
    let cutoff = 0.5 / factor;
    let half = (4.0 * factor).ceil() as isize;
    let len = (2 * half + 1) as f64;
    let taps: Vec<f64> = (-half..=half)
        .map(|n| {
            let x = n as f64;
            let sinc = if n == 0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * x).sin() / (PI * x)
            };
            let w = 0.54 - 0.46 * (2.0 * PI * (x + half as f64) / (len - 1.0)).cos();
            sinc * w
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Decimates to exactly 1024 samples by uniform index selection
/// (`k * len / 1024`), low-pass filtering first whenever the signal is
/// longer. Edge samples are replicated under the filter.
pub fn resample_to_base(signal: &BasebandSignal) -> Result<BasebandSignal, ModulationError> {
    let len = signal.samples.len();
    if len < BASE_LENGTH {
        return Err(ModulationError::TooShort { len, min: BASE_LENGTH });
    }
    if len == BASE_LENGTH {
        return Ok(signal.clone());
    }
    let factor = len as f64 / BASE_LENGTH as f64;
    let taps = lowpass_taps(factor);
    let half = (taps.len() / 2) as isize;
    let x = &signal.samples;
    let samples = (0..BASE_LENGTH)
        .map(|k| {
            let center = (k * len / BASE_LENGTH) as isize;
            taps.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (t, &h)| {
                let idx = (center + t as isize - half).clamp(0, len as isize - 1) as usize;
                acc + x[idx] * h
            })
        })
        .collect();
    Ok(BasebandSignal { samples, ..signal.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulation::{ModulationScheme, SAMPLE_RATE_HZ};

    fn sig(samples: Vec<Complex64>) -> BasebandSignal {
        BasebandSignal {
            samples,
            sample_rate_hz: SAMPLE_RATE_HZ,
            scheme: ModulationScheme::Gmsk,
            seed: 0,
        }
    }

    #[test]
    fn identity_at_base_length() {
        let s = sig((0..1024).map(|i| Complex64::new(i as f64, -(i as f64))).collect());
        assert_eq!(resample_to_base(&s).unwrap(), s);
    }

    #[test]
    fn gmsk_length() {
        let s = sig(vec![Complex64::new(0.3, 0.1); 8196]);
        assert_eq!(resample_to_base(&s).unwrap().samples.len(), 1024);
    }

    #[test]
    fn constant_is_preserved() {
        for len in [1025, 2048, 8196] {
            let c = Complex64::new(0.7, -0.2);
            let out = resample_to_base(&sig(vec![c; len])).unwrap();
            let first = out.samples[0];
            assert!(out.samples.iter().all(|&v| v == first));
            assert!((first - c).norm() < 1e-12);
        }
    }

    #[test]
    fn too_short_rejected() {
        assert!(matches!(
            resample_to_base(&sig(vec![Complex64::new(1.0, 0.0); 1000])),
            Err(ModulationError::TooShort { len: 1000, .. })
        ));
    }

    #[test]
    fn passband_tone_survives() {
        // a slow tone well inside the passband keeps its amplitude
        let len = 8192;
        let f = 0.01;
        let s = sig((0..len).map(|n| Complex64::from_polar(1.0, 2.0 * PI * f * n as f64)).collect());
        let out = resample_to_base(&s).unwrap();
        for v in &out.samples[8..1016] {
            assert!((v.norm() - 1.0).abs() < 0.01, "{}", v.norm());
        }
    }
}
