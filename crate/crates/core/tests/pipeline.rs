//! End-to-end determinism of dataset generation and training through the
//! on-disk formats.

use std::collections::BTreeMap;
use std::path::Path;

use denomae::model::{Checkpoint, DenoMAE, DenoMAEConfig};
use denomae::modulation::ModulationScheme;
use denomae::pipeline::{
    generate_dataset, generate_samples, load_dataset, pretrain, GenSpec, MetricsLog, RenderConfig, RunConfig, Split, TrainConfig,
};

fn spec(split: Split, samples: usize, seed: u64) -> GenSpec {
    GenSpec {
        split,
        samples,
        schemes: vec![ModulationScheme::Qpsk, ModulationScheme::Fsk4, ModulationScheme::Gmsk],
        snr_min: -5.0,
        snr_max: 5.0,
        seed,
        image_side: 32,
        render: RenderConfig::default(),
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            for (k, v) in tree(&p) {
                out.insert(format!("{}/{k}", p.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn scheme_alphabets_are_distinct() {
    let key = |s: ModulationScheme| {
        let mut pts: Vec<(i64, i64)> = s
            .alphabet()
            .iter()
            .map(|c| ((c.re * 1e6).round() as i64, (c.im * 1e6).round() as i64))
            .collect();
        pts.sort();
        pts.dedup();
        pts
    };
    let linear = [
        ModulationScheme::Bpsk,
        ModulationScheme::Qpsk,
        ModulationScheme::Psk8,
        ModulationScheme::Qam16,
        ModulationScheme::Qam64,
        ModulationScheme::Pam4,
    ];
    for (i, a) in linear.iter().enumerate() {
        for b in &linear[i + 1..] {
            assert_ne!(key(*a), key(*b), "{a} and {b} share an alphabet");
        }
    }
}

#[test]
fn dataset_generation_is_reproducible_on_disk() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = spec(Split::Pretrain, 6, 21);
    generate_dataset(&s, a.path()).unwrap();
    generate_dataset(&s, b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);

    let (manifest, loaded) = load_dataset(a.path(), 32).unwrap();
    assert_eq!(manifest.split(), Some(Split::Pretrain));
    let fresh = generate_samples(&s).unwrap();
    assert_eq!(loaded.len(), fresh.len());
    for (l, f) in loaded.iter().zip(&fresh) {
        assert_eq!(l.label(), f.label());
        assert_eq!(l.images, f.images);
    }
}

#[test]
fn splits_and_seeds_give_different_data() {
    let a = generate_samples(&spec(Split::Pretrain, 3, 1)).unwrap();
    let b = generate_samples(&spec(Split::FinetuneTrain, 3, 1)).unwrap();
    let c = generate_samples(&spec(Split::Pretrain, 3, 2)).unwrap();
    assert_ne!(a[0].images, b[0].images);
    assert_ne!(a[0].images, c[0].images);
}

#[test]
fn identical_pretraining_runs_write_identical_checkpoints() {
    let data = generate_samples(&spec(Split::Pretrain, 6, 5)).unwrap();
    let mut config = DenoMAEConfig::desk();
    config.d_model = 16;
    config.heads = 2;
    config.encoder_layers = 1;
    let train = TrainConfig {
        epochs: 2,
        batch_size: 4,
        checkpoint_every: 1,
        ..RunConfig::desk().pretrain
    };
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let model = DenoMAE::new(config.clone(), 8).unwrap();
        let out = pretrain(model, &data, &train, 8, None, Some(dir.path()), &mut MetricsLog::in_memory()).unwrap();
        let bytes = std::fs::read(out.checkpoint.unwrap()).unwrap();
        (out.step_losses, bytes, tree(dir.path()).into_keys().collect::<Vec<_>>())
    };
    let (la, ba, files_a) = run();
    let (lb, bb, files_b) = run();
    assert_eq!(
        la.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        lb.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(ba, bb);
    assert_eq!(files_a, files_b);
    assert_eq!(files_a.len(), 3);
    let ck = Checkpoint::decode(&ba).unwrap();
    assert_eq!(ck.model.config, config);
}
