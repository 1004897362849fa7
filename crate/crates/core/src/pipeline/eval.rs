use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{generate_samples, GenSpec, ModalitySample, Split};
use super::metrics::MetricsLog;
use super::train::{accuracy, finetune, pretrain};
use super::{DataConfig, PipelineError, Result, RunConfig};
use crate::constellation::{hstack, write_ppm};
use crate::model::{DenoMAE, Modality, Visibility};
use crate::numerics::{SeedKey, Tensor};

/// Reference accuracies (percent) at -10 dB and +10 dB for the full-scale model.
pub const SWEEP_REFERENCE: [(f64, f64); 2] = [(-10.0, 77.50), (10.0, 84.30)];

/// Reference accuracies (percent) for the five nested modality subsets.
pub const ABLATION_REFERENCE: [f64; 5] = [81.30, 81.90, 83.20, 83.30, 83.50];

/// Mean squared difference of two equally shaped tensors, in f64.
pub fn image_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(PipelineError::Data(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.data().is_empty() {
        return Err(PipelineError::Data("mse of empty tensors".into()));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Fresh evaluation samples at exactly `snr_db`. The stream depends on the
/// SNR, so every sweep point gets its own samples, disjoint from training.
fn fresh_samples(data: &DataConfig, snr_db: f64, samples: usize, seed: u64, image_side: usize) -> Result<Vec<ModalitySample>> {
    if samples == 0 {
        return Err(PipelineError::Data(format!("empty test set at {snr_db} dB")));
    }
    let spec = GenSpec {
        split: Split::Eval,
        samples,
        schemes: data.schemes.clone(),
        snr_min: snr_db,
        snr_max: snr_db,
        seed: SeedKey::new(seed).named("eval").child(snr_db.to_bits()).value(),
        image_side,
        render: data.render.clone(),
    };
    generate_samples(&spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr_db: f64,
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub reference: Vec<(f64, f64)>,
}

impl SweepReport {
    /// `snr_db  samples  accuracy  reference` with `-` where no reference exists.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("snr_db\tsamples\taccuracy\treference\n");
        for r in &self.rows {
            let reference = self
                .reference
                .iter()
                .find(|(s, _)| *s == r.snr_db)
                .map_or_else(|| "-".to_string(), |(_, a)| format!("{a:.2}"));
            writeln!(out, "{}\t{}\t{:.2}\t{}", r.snr_db, r.samples, r.accuracy, reference).unwrap();
        }
        out
    }
}

/// Classification accuracy per SNR on freshly generated test sets.
pub fn evaluate_snr_sweep(model: &DenoMAE, snrs: &[f64], samples_per_snr: usize, data: &DataConfig, seed: u64) -> Result<SweepReport> {
    if snrs.is_empty() {
        return Err(PipelineError::Config("empty SNR list".into()));
    }
    let mut rows = Vec::with_capacity(snrs.len());
    for &snr in snrs {
        let set = fresh_samples(data, snr, samples_per_snr, seed, model.config.image_side)?;
        rows.push(SweepRow {
            snr_db: snr,
            samples: set.len(),
            accuracy: accuracy(model, &set)?,
        });
    }
    Ok(SweepReport {
        rows,
        reference: SWEEP_REFERENCE.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationRow {
    pub snr_db: f64,
    pub samples: usize,
    pub mse_noisy: f64,
    pub mse_denoised: f64,
    /// Fraction of samples whose denoised image is closer to the clean one
    /// than the noisy input is.
    pub improved_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationReport {
    pub rows: Vec<ExtrapolationRow>,
    pub triptychs: Vec<PathBuf>,
}

impl ExtrapolationReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("snr_db\tsamples\tmse_noisy\tmse_denoised\timproved_fraction\n");
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.4}",
                r.snr_db, r.samples, r.mse_noisy, r.mse_denoised, r.improved_fraction
            )
            .unwrap();
        }
        out
    }
}

/// Where and how many noisy / denoised / clean strips to write per SNR.
#[derive(Clone, Debug)]
pub struct TriptychOutput<'a> {
    pub dir: &'a Path,
    pub per_snr: usize,
}

/// Reconstructs the clean constellation from the observed (noisy)
/// modalities at SNRs below the training range and compares it with the
/// noisy constellation as a do-nothing baseline. Decoder outputs are clipped
/// to the image range [0, 1] before scoring.
pub fn evaluate_extrapolation(
    model: &DenoMAE,
    snrs: &[f64],
    samples_per_snr: usize,
    data: &DataConfig,
    observed_ratio: f64,
    seed: u64,
    triptychs: Option<TriptychOutput<'_>>,
) -> Result<ExtrapolationReport> {
    if snrs.is_empty() {
        return Err(PipelineError::Config("empty SNR list".into()));
    }
    if let Some(&s) = snrs.iter().find(|&&s| s >= data.snr_min) {
        return Err(PipelineError::Config(format!(
            "{s} dB is not below the training range starting at {} dB",
            data.snr_min
        )));
    }
    let clean_slot = model
        .slot(Modality::CleanConstellation)
        .ok_or_else(|| PipelineError::Config("model has no clean constellation decoder".into()))?;
    if !model.config.modalities.iter().any(|m| m.is_observed()) {
        return Err(PipelineError::Config("model has no observed modality to denoise from".into()));
    }
    let visibility = Visibility::denoising(&model.config, observed_ratio);
    let mut rows = Vec::with_capacity(snrs.len());
    let mut written = Vec::new();
    for &snr in snrs {
        let set = fresh_samples(data, snr, samples_per_snr, seed, model.config.image_side)?;
        let scored = set
            .par_iter()
            .map(|s| {
                let inputs: Vec<Option<&Tensor>> = model
                    .config
                    .modalities
                    .iter()
                    .map(|m| m.is_observed().then(|| s.image(*m)))
                    .collect();
                let mut out = model.denoise(&inputs, &visibility, s.seed)?.images.swap_remove(clean_slot);
                out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                let clean = s.image(Modality::CleanConstellation);
                let noisy = s.image(Modality::NoisyConstellation);
                Ok((image_mse(noisy, clean)?, image_mse(&out, clean)?, out))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = scored.len() as f64;
        rows.push(ExtrapolationRow {
            snr_db: snr,
            samples: scored.len(),
            mse_noisy: scored.iter().map(|r| r.0).sum::<f64>() / n,
            mse_denoised: scored.iter().map(|r| r.1).sum::<f64>() / n,
            improved_fraction: scored.iter().filter(|r| r.1 < r.0).count() as f64 / n,
        });
        if let Some(t) = &triptychs {
            for (s, (_, _, den)) in set.iter().zip(&scored).take(t.per_snr) {
                let strip = hstack(&[s.image(Modality::NoisyConstellation), den, s.image(Modality::CleanConstellation)])?;
                let path = t.dir.join(format!("triptych_{snr}dB_{}.ppm", s.sample_id));
                write_ppm(&path, &strip)?;
                written.push(path);
            }
        }
    }
    Ok(ExtrapolationReport { rows, triptychs: written })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub modalities: Vec<Modality>,
    pub test_accuracy: f64,
    pub reference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("modalities\tcount\ttest_accuracy\treference\n");
        for r in &self.rows {
            let names: Vec<&str> = r.modalities.iter().map(|m| m.name()).collect();
            writeln!(
                out,
                "{}\t{}\t{:.2}\t{:.2}",
                names.join(","),
                r.modalities.len(),
                r.test_accuracy,
                r.reference
            )
            .unwrap();
        }
        out
    }
}

/// Pretrains and fine-tunes a fresh model for each of the five nested
/// modality subsets (a new classification head every time) and reports the
/// final test accuracy of each.
pub fn run_modality_ablation(
    run: &RunConfig,
    pretrain_data: &[ModalitySample],
    train: &[ModalitySample],
    test: &[ModalitySample],
    log: &mut MetricsLog,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (subset, reference) in Modality::ablation_subsets().into_iter().zip(ABLATION_REFERENCE) {
        let cfg = run.model.clone().with_modalities(&subset);
        let model = DenoMAE::new(cfg, run.seed)?;
        let pre = pretrain(model, pretrain_data, &run.pretrain, run.seed, None, None, log)?;
        let ft = finetune(pre.model, train, test, &run.finetune, run.seed, None, None, log)?;
        rows.push(AblationRow {
            modalities: subset,
            test_accuracy: accuracy(&ft.model, test)?,
            reference,
        });
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoMAEConfig;
    use crate::modulation::ModulationScheme;
    use crate::pipeline::synthesize_sample;

    fn tiny_data() -> DataConfig {
        let mut d = RunConfig::desk().data;
        d.schemes = vec![ModulationScheme::Bpsk, ModulationScheme::Qpsk];
        d
    }

    fn tiny_model() -> DenoMAE {
        let mut c = DenoMAEConfig::desk();
        c.d_model = 16;
        c.heads = 2;
        c.encoder_layers = 1;
        c.classifier.hidden = 8;
        DenoMAE::new(c, 2).unwrap()
    }

    #[test]
    fn mse_baselines() {
        let d = fresh_samples(&tiny_data(), 0.0, 1, 1, 32).unwrap();
        let s = &d[0];
        let noisy = s.image(Modality::NoisyConstellation);
        let clean = s.image(Modality::CleanConstellation);
        // an identity denoiser scores exactly the noisy baseline
        assert_eq!(image_mse(noisy, clean).unwrap(), image_mse(&noisy.clone(), clean).unwrap());
        assert_eq!(image_mse(clean, clean).unwrap(), 0.0);
        assert!(image_mse(noisy, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn noiseless_input_has_zero_baseline() {
        let render = tiny_data().render;
        for (i, scheme) in [ModulationScheme::Qam16, ModulationScheme::Gmsk].into_iter().enumerate() {
            let s = synthesize_sample(format!("s{i}"), scheme, f64::INFINITY, i as u64, 32, &render).unwrap();
            assert_eq!(
                image_mse(s.image(Modality::NoisyConstellation), s.image(Modality::CleanConstellation)).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn sweep_shape_and_reference() {
        let m = tiny_model();
        let one = evaluate_snr_sweep(&m, &[5.0], 4, &tiny_data(), 1).unwrap();
        assert_eq!(one.rows.len(), 1);
        let three = evaluate_snr_sweep(&m, &[-10.0, 0.0, 10.0], 4, &tiny_data(), 1).unwrap();
        let tsv = three.to_tsv();
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.contains("77.50") && tsv.contains("84.30"));
        assert!(evaluate_snr_sweep(&m, &[0.0], 0, &tiny_data(), 1).is_err());
        assert!(evaluate_snr_sweep(&m, &[], 4, &tiny_data(), 1).is_err());
    }

    #[test]
    fn extrapolation_rows_and_strips() {
        let m = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let out = TriptychOutput {
            dir: dir.path(),
            per_snr: 1,
        };
        let r = evaluate_extrapolation(&m, &[-12.0, -20.0], 3, &tiny_data(), 0.0, 4, Some(out)).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.triptychs.len(), 2);
        let bytes = std::fs::read(&r.triptychs[0]).unwrap();
        assert!(bytes.starts_with(b"P6\n96 32\n255\n"));
        assert!(r
            .rows
            .iter()
            .all(|row| row.mse_noisy > 0.0 && (0.0..=1.0).contains(&row.improved_fraction)));
        assert_eq!(r.to_tsv().lines().count(), 3);
        // inside the training range
        assert!(evaluate_extrapolation(&m, &[-5.0], 3, &tiny_data(), 0.0, 4, None).is_err());
    }

    #[test]
    fn extrapolation_needs_clean_decoder() {
        let mut c = tiny_model().config;
        c = c.with_modalities(&[Modality::NoisyConstellation, Modality::NoisySignal]);
        let m = DenoMAE::new(c, 1).unwrap();
        assert!(matches!(
            evaluate_extrapolation(&m, &[-12.0], 2, &tiny_data(), 0.0, 1, None),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn ablation_table_shape() {
        let mut run = RunConfig::desk();
        run.model = tiny_model().config;
        run.pretrain.epochs = 1;
        run.finetune.epochs = 1;
        run.pretrain.batch_size = 4;
        run.finetune.batch_size = 4;
        let mk = |split, n, seed| {
            generate_samples(&GenSpec {
                split,
                samples: n,
                schemes: tiny_data().schemes,
                snr_min: 0.0,
                snr_max: 10.0,
                seed,
                image_side: 32,
                render: Default::default(),
            })
            .unwrap()
        };
        let mut log = MetricsLog::in_memory();
        let r = run_modality_ablation(
            &run,
            &mk(Split::Pretrain, 4, 1),
            &mk(Split::FinetuneTrain, 4, 1),
            &mk(Split::FinetuneTest, 4, 1),
            &mut log,
        )
        .unwrap();
        assert_eq!(r.rows.len(), 5);
        let counts: Vec<usize> = r.rows.iter().map(|x| x.modalities.len()).collect();
        assert_eq!(counts, vec![1, 2, 3, 4, 5]);
        let refs: Vec<f64> = r.rows.iter().map(|x| x.reference).collect();
        assert_eq!(refs, ABLATION_REFERENCE.to_vec());
        assert_eq!(r.to_tsv().lines().count(), 6);
    }
}
