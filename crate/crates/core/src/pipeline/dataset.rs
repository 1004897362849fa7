use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PipelineError, RenderConfig, Result};
use crate::constellation::render_rgb;
use crate::model::Modality;
use crate::modulation::{apply_awgn, signal_to_image, synthesize_base, ModulationScheme};
use crate::numerics::{dtnsr, SeedKey, Tensor};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    FinetuneTrain,
    FinetuneTest,
    /// Fresh samples drawn by the evaluation protocols.
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::FinetuneTrain => "finetune-train",
            Split::FinetuneTest => "finetune-test",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub split: Split,
    pub samples: usize,
    pub schemes: Vec<ModulationScheme>,
    pub snr_min: f64,
    pub snr_max: f64,
    pub seed: u64,
    pub image_side: usize,
    pub render: RenderConfig,
}

impl GenSpec {
    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(PipelineError::Config("sample count must be positive".into()));
        }
        if self.schemes.is_empty() {
            return Err(PipelineError::Config("no modulation schemes selected".into()));
        }
        if !(self.snr_min.is_finite() && self.snr_max.is_finite() && self.snr_min <= self.snr_max) {
            return Err(PipelineError::Config(format!(
                "invalid SNR range [{}, {}]",
                self.snr_min, self.snr_max
            )));
        }
        if self.image_side < 32 {
            return Err(PipelineError::Config(format!("image side {} below 32", self.image_side)));
        }
        Ok(())
    }

    /// Seed of sample `index`; distinct splits draw from distinct streams.
    pub fn sample_seed(&self, index: usize) -> u64 {
        SeedKey::new(self.seed).named(self.split.name()).child(index as u64).value()
    }
}

/// The five aligned views of one example, in [`Modality::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySample {
    pub sample_id: String,
    pub scheme: ModulationScheme,
    pub snr_db: f64,
    pub seed: u64,
    pub images: [Tensor; 5],
}

impl ModalitySample {
    pub fn image(&self, m: Modality) -> &Tensor {
        &self.images[m as usize]
    }

    pub fn select(&self, modalities: &[Modality]) -> Vec<Tensor> {
        modalities.iter().map(|&m| self.image(m).clone()).collect()
    }

    pub fn label(&self) -> usize {
        self.scheme.index()
    }
}

/// Synthesizes one example: clean baseband signal, AWGN at `snr_db`,
/// constellation renderings and signal images.
pub fn synthesize_sample(
    sample_id: String,
    scheme: ModulationScheme,
    snr_db: f64,
    seed: u64,
    image_side: usize,
    render: &RenderConfig,
) -> Result<ModalitySample> {
    let clean = synthesize_base(scheme, seed)?;
    let draw = apply_awgn(&clean, snr_db, seed)?;
    let grid = render.grid(image_side);
    let noise_re: Vec<f64> = draw.noise.iter().map(|c| c.re).collect();
    let images = [
        render_rgb(&draw.noisy.samples, &grid, &render.decay)?,
        render_rgb(&draw.clean.samples, &grid, &render.decay)?,
        signal_to_image(&draw.noisy.in_phase(), image_side)?,
        signal_to_image(&draw.clean.in_phase(), image_side)?,
        signal_to_image(&noise_re, image_side)?,
    ];
    Ok(ModalitySample {
        sample_id,
        scheme,
        snr_db,
        seed,
        images,
    })
}

fn draw_sample(spec: &GenSpec, index: usize) -> Result<ModalitySample> {
    let seed = spec.sample_seed(index);
    let mut rng = SeedKey::new(seed).named("draw").rng();
    let scheme = spec.schemes[rng.random_range(0..spec.schemes.len())];
    let u: f64 = rng.random();
    let snr_db = spec.snr_min + (spec.snr_max - spec.snr_min) * u;
    let id = format!("{}-{:016x}", spec.split, seed);
    synthesize_sample(id, scheme, snr_db, seed, spec.image_side, &spec.render)
}

/// Generates samples in memory, in parallel across samples. The output
/// depends only on `spec`.
pub fn generate_samples(spec: &GenSpec) -> Result<Vec<ModalitySample>> {
    spec.validate()?;
    let samples = (0..spec.samples)
        .into_par_iter()
        .map(|i| draw_sample(spec, i))
        .collect::<Result<Vec<_>>>()?;
    check_unique(samples.iter().map(|s| s.sample_id.as_str()))?;
    Ok(samples)
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(PipelineError::Data(format!("duplicate sample id {id}")));
        }
    }
    Ok(())
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub version: u32,
    pub split: Split,
    pub sample_id: String,
    pub scheme: ModulationScheme,
    pub label: usize,
    pub snr_db: f64,
    pub seed: u64,
    /// Tensor paths relative to the manifest directory.
    pub files: BTreeMap<Modality, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn split(&self) -> Option<Split> {
        self.records.first().map(|r| r.split)
    }

    /// Accepts either a manifest file or the directory holding one.
    pub fn resolve(path: &Path) -> PathBuf {
        if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = Self::resolve(path);
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let f = std::fs::File::open(&file).map_err(|e| PipelineError::io(&file, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| PipelineError::io(&file, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| PipelineError::Data(format!("{}:{}: {e}", file.display(), n + 1)))?;
            if r.version != MANIFEST_VERSION {
                return Err(PipelineError::Data(format!(
                    "{}:{}: unsupported version {}",
                    file.display(),
                    n + 1,
                    r.version
                )));
            }
            records.push(r);
        }
        if records.is_empty() {
            return Err(PipelineError::Data(format!("{} has no records", file.display())));
        }
        if records.iter().any(|r| r.split != records[0].split) {
            return Err(PipelineError::Data(format!("{} mixes splits", file.display())));
        }
        check_unique(records.iter().map(|r| r.sample_id.as_str()))?;
        Ok(Manifest { dir, records })
    }

    pub fn write(&self) -> Result<()> {
        let file = self.path();
        let mut out = Vec::new();
        for r in &self.records {
            out.extend_from_slice(serde_json::to_string(r).expect("record serializes").as_bytes());
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(&file).map_err(|e| PipelineError::io(&file, e))?;
        f.write_all(&out).map_err(|e| PipelineError::io(&file, e))
    }
}

/// Generates `spec` into `out_dir`: one DTNSR file per modality and sample
/// under `tensors/`, plus `manifest.jsonl`.
pub fn generate_dataset(spec: &GenSpec, out_dir: &Path) -> Result<Manifest> {
    let samples = generate_samples(spec)?;
    let tensors = out_dir.join("tensors");
    std::fs::create_dir_all(&tensors).map_err(|e| PipelineError::io(&tensors, e))?;
    let records = samples
        .par_iter()
        .map(|s| {
            let rel_dir = format!("tensors/{}", s.sample_id);
            let abs_dir = out_dir.join(&rel_dir);
            std::fs::create_dir_all(&abs_dir).map_err(|e| PipelineError::io(&abs_dir, e))?;
            let mut files = BTreeMap::new();
            for m in Modality::ALL {
                let rel = format!("{rel_dir}/{m}.dtnsr");
                let path = out_dir.join(&rel);
                dtnsr::save(&path, s.image(m)).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
                files.insert(m, rel);
            }
            Ok(ManifestRecord {
                version: MANIFEST_VERSION,
                split: spec.split,
                sample_id: s.sample_id.clone(),
                scheme: s.scheme,
                label: s.label(),
                snr_db: s.snr_db,
                seed: s.seed,
                files,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        dir: out_dir.to_path_buf(),
        records,
    };
    manifest.write()?;
    Ok(manifest)
}

/// Reads a manifest and every tensor it references, checking shapes.
pub fn load_dataset(path: &Path, image_side: usize) -> Result<(Manifest, Vec<ModalitySample>)> {
    let manifest = Manifest::read(path)?;
    let expected = [3, image_side, image_side];
    let samples = manifest
        .records
        .par_iter()
        .map(|r| {
            let load = |m: Modality| -> Result<Tensor> {
                let rel = r
                    .files
                    .get(&m)
                    .ok_or_else(|| PipelineError::Data(format!("{}: missing {m} tensor", r.sample_id)))?;
                let p = manifest.dir.join(rel);
                let t = dtnsr::load(&p).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))?;
                if t.shape() != expected {
                    return Err(PipelineError::Data(format!(
                        "{}: shape {:?}, expected {:?}",
                        p.display(),
                        t.shape(),
                        expected
                    )));
                }
                Ok(t)
            };
            if r.label != r.scheme.index() {
                return Err(PipelineError::Data(format!(
                    "{}: label {} does not match {}",
                    r.sample_id, r.label, r.scheme
                )));
            }
            Ok(ModalitySample {
                sample_id: r.sample_id.clone(),
                scheme: r.scheme,
                snr_db: r.snr_db,
                seed: r.seed,
                images: [
                    load(Modality::NoisyConstellation)?,
                    load(Modality::CleanConstellation)?,
                    load(Modality::NoisySignal)?,
                    load(Modality::CleanSignal)?,
                    load(Modality::Noise)?,
                ],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// Fails when two sample sets share an id or a seed.
pub fn assert_disjoint(a: &[ModalitySample], b: &[ModalitySample]) -> Result<()> {
    let ids: HashSet<&str> = a.iter().map(|s| s.sample_id.as_str()).collect();
    let seeds: HashSet<u64> = a.iter().map(|s| s.seed).collect();
    for s in b {
        if ids.contains(s.sample_id.as_str()) || seeds.contains(&s.seed) {
            return Err(PipelineError::Data(format!(
                "sample {} (seed {}) appears in both sets",
                s.sample_id, s.seed
            )));
        }
    }
    Ok(())
}
