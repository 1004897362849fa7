use std::path::{Path, PathBuf};

use denomae::model::{Checkpoint, DenoMAE, DenoMAEConfig, Modality};
use denomae::modulation::ModulationScheme;
use denomae::pipeline::{
    evaluate_extrapolation, evaluate_snr_sweep, finetune, generate_dataset, load_dataset, pretrain, run_modality_ablation, GenSpec,
    MetricsLog, ModalitySample, PipelineError, Result, Split, TrainState, TriptychOutput,
};

use crate::args::{AblateArgs, Command, DenoiseArgs, EvalArgs, FinetuneArgs, GenArgs, PretrainArgs};
use crate::settings::{apply_train, load, parse_list, parse_snrs, prepare_out, write_resolved};

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => eval(a),
        Command::Denoise(a) => denoise(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn load_split(path: &Path, split: Split, image_side: usize) -> Result<Vec<ModalitySample>> {
    let (manifest, samples) = load_dataset(path, image_side)?;
    match manifest.split() {
        Some(s) if s == split => Ok(samples),
        other => Err(PipelineError::Data(format!(
            "{} holds the {} split, expected {split}",
            path.display(),
            other.map_or("empty", |s| s.name())
        ))),
    }
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, TrainState)> {
    let ck = Checkpoint::load(path)?;
    let state = TrainState::from_checkpoint(&ck)?;
    Ok((ck, state))
}

fn mismatch(path: &Path, what: &str) -> PipelineError {
    PipelineError::Config(format!("checkpoint {} does not match the configured {what}", path.display()))
}

fn gen(a: &GenArgs) -> Result<()> {
    let mut cfg = load(&a.common)?;
    if let Some(v) = a.snr_min {
        cfg.data.snr_min = v;
    }
    if let Some(v) = a.snr_max {
        cfg.data.snr_max = v;
    }
    if let Some(s) = &a.schemes {
        cfg.data.schemes = parse_list::<ModulationScheme>(s, "scheme")?;
    }
    if let Some(n) = a.samples {
        if n == 0 {
            return Err(PipelineError::Config("--samples must be positive".into()));
        }
        cfg.data.pretrain_samples = n;
        cfg.data.finetune_train_samples = n;
        cfg.data.finetune_test_samples = n;
    }
    cfg.validate()?;
    let out = &a.common.out;
    prepare_out(out, a.common.overwrite, false)?;
    write_resolved(out, &cfg)?;
    let all = [
        (Split::Pretrain, cfg.data.pretrain_samples),
        (Split::FinetuneTrain, cfg.data.finetune_train_samples),
        (Split::FinetuneTest, cfg.data.finetune_test_samples),
    ];
    for (split, samples) in all.into_iter().filter(|(s, _)| a.split == "all" || a.split == s.name()) {
        let spec = GenSpec {
            split,
            samples,
            schemes: cfg.data.schemes.clone(),
            snr_min: cfg.data.snr_min,
            snr_max: cfg.data.snr_max,
            seed: cfg.seed,
            image_side: cfg.model.image_side,
            render: cfg.data.render.clone(),
        };
        let m = generate_dataset(&spec, &out.join(split.name()))?;
        println!("{split}: {} samples -> {}", m.records.len(), m.path().display());
    }
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = load(&a.common)?;
    apply_train(&mut cfg.pretrain, &a.train);
    if let Some(m) = &a.modalities {
        cfg.model = cfg.model.clone().with_modalities(&parse_list::<Modality>(m, "modality")?);
    }
    cfg.validate()?;
    let out = &a.common.out;
    prepare_out(out, a.common.overwrite, a.resume.is_some())?;
    write_resolved(out, &cfg)?;
    let data = load_split(&a.data, Split::Pretrain, cfg.model.image_side)?;
    let (model, resume) = match &a.resume {
        Some(p) => {
            let (ck, state) = load_checkpoint(p)?;
            if ck.model.config != cfg.model {
                return Err(mismatch(p, "model"));
            }
            (ck.model, Some(state))
        }
        None => (DenoMAE::new(cfg.model.clone(), cfg.seed)?, None),
    };
    let ck_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(|e| PipelineError::io(&ck_dir, e))?;
    let mut log = MetricsLog::open(&out.join("metrics.jsonl"))?;
    let o = pretrain(model, &data, &cfg.pretrain, cfg.seed, resume, Some(&ck_dir), &mut log)?;
    if let Some(last) = o.step_losses.last() {
        println!("final batch loss {last:.6}");
    }
    println!("checkpoint {}", o.checkpoint.expect("directory was given").display());
    Ok(())
}

fn same_architecture(a: &DenoMAEConfig, b: &DenoMAEConfig) -> bool {
    let mut a = a.clone();
    a.freeze_encoder = b.freeze_encoder;
    a == *b
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    let mut cfg = load(&a.common)?;
    apply_train(&mut cfg.finetune, &a.train_flags);
    if a.freeze_encoder {
        cfg.model.freeze_encoder = true;
    }
    cfg.validate()?;
    let out = &a.common.out;
    prepare_out(out, a.common.overwrite, false)?;
    write_resolved(out, &cfg)?;
    let train = load_split(&a.train, Split::FinetuneTrain, cfg.model.image_side)?;
    let test = load_split(&a.test, Split::FinetuneTest, cfg.model.image_side)?;
    let model = match (&a.checkpoint, a.from_scratch) {
        (Some(p), false) => {
            let (ck, _) = load_checkpoint(p)?;
            if !same_architecture(&ck.model.config, &cfg.model) {
                return Err(mismatch(p, "model"));
            }
            let mut m = ck.model;
            m.config.freeze_encoder = cfg.model.freeze_encoder;
            m
        }
        _ => DenoMAE::new(cfg.model.clone(), cfg.seed)?,
    };
    let ck_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(|e| PipelineError::io(&ck_dir, e))?;
    let mut log = MetricsLog::open(&out.join("metrics.jsonl"))?;
    let o = finetune(model, &train, &test, &cfg.finetune, cfg.seed, None, Some(&ck_dir), &mut log)?;
    let mut tsv = String::from("epoch\ttrain_loss\ttrain_accuracy\ttest_accuracy\n");
    for h in &o.history {
        tsv.push_str(&format!(
            "{}\t{:.6}\t{:.2}\t{:.2}\n",
            h.epoch, h.train_loss, h.train_accuracy, h.test_accuracy
        ));
    }
    write_text(&out.join("accuracy.tsv"), &tsv)?;
    if let Some(h) = o.history.last() {
        println!("test accuracy {:.2}%", h.test_accuracy);
    }
    println!("checkpoint {}", o.checkpoint.expect("directory was given").display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = load(&a.common)?;
    cfg.data.validate()?;
    let snrs = parse_snrs(&a.snrs)?;
    let out = &a.common.out;
    prepare_out(out, a.common.overwrite, false)?;
    write_resolved(out, &cfg)?;
    let (ck, state) = load_checkpoint(&a.checkpoint)?;
    if state.phase != "finetune" {
        return Err(PipelineError::Config(format!(
            "{} is a {} checkpoint; eval needs a fine-tuned classifier",
            a.checkpoint.display(),
            state.phase
        )));
    }
    let report = evaluate_snr_sweep(&ck.model, &snrs, a.samples_per_snr, &cfg.data, cfg.seed)?;
    let tsv = report.to_tsv();
    write_text(&out.join("sweep.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn denoise(a: &DenoiseArgs) -> Result<()> {
    let cfg = load(&a.common)?;
    cfg.data.validate()?;
    let snrs = parse_snrs(&a.snrs)?;
    let out = &a.common.out;
    prepare_out(out, a.common.overwrite, false)?;
    write_resolved(out, &cfg)?;
    let (ck, _) = load_checkpoint(&a.checkpoint)?;
    let strips: PathBuf = out.join("triptychs");
    std::fs::create_dir_all(&strips).map_err(|e| PipelineError::io(&strips, e))?;
    let report = evaluate_extrapolation(
        &ck.model,
        &snrs,
        a.samples_per_snr,
        &cfg.data,
        a.observed_ratio,
        cfg.seed,
        Some(TriptychOutput {
            dir: &strips,
            per_snr: a.triptychs,
        }),
    )?;
    let tsv = report.to_tsv();
    write_text(&out.join("denoise.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = load(&a.common)?;
    cfg.validate()?;
    let out = &a.common.out;
    prepare_out(out, a.common.overwrite, false)?;
    write_resolved(out, &cfg)?;
    let side = cfg.model.image_side;
    let pre = load_split(&a.pretrain_data, Split::Pretrain, side)?;
    let train = load_split(&a.train, Split::FinetuneTrain, side)?;
    let test = load_split(&a.test, Split::FinetuneTest, side)?;
    let mut log = MetricsLog::open(&out.join("metrics.jsonl"))?;
    let report = run_modality_ablation(&cfg, &pre, &train, &test, &mut log)?;
    let tsv = report.to_tsv();
    write_text(&out.join("ablation.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}
