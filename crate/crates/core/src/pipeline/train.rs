use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{assert_disjoint, ModalitySample};
use super::metrics::{MetricEvent, MetricsLog};
use super::{PipelineError, Result, TrainConfig};
use crate::model::{Checkpoint, DenoMAE, Modality, ModelError, ParamGroup};
use crate::numerics::{ParamId, ParamStore, SeedKey, Tape, TensorError};

/// Position of a training run, stored in every checkpoint it writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: String,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl TrainState {
    fn fresh(phase: &str, seed: u64, train: &TrainConfig) -> Self {
        TrainState {
            phase: phase.into(),
            epochs_done: 0,
            steps_done: 0,
            seed,
            train: train.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ck.train_state.clone()).map_err(|e| PipelineError::Data(format!("checkpoint training state: {e}")))
    }

    fn check_resumable(&self, phase: &str, seed: u64, train: &TrainConfig) -> Result<()> {
        let same = self.phase == phase
            && self.seed == seed
            && self.train.batch_size == train.batch_size
            && self.train.lr == train.lr
            && self.train.optimizer == train.optimizer
            && self.train.weight_decay == train.weight_decay;
        if !same {
            return Err(PipelineError::Config(format!(
                "checkpoint was written by a different {} run (phase {}, seed {})",
                phase, self.phase, self.seed
            )));
        }
        if self.epochs_done > train.epochs {
            return Err(PipelineError::Config(format!(
                "checkpoint is past epoch {} of a {}-epoch run",
                self.epochs_done, train.epochs
            )));
        }
        Ok(())
    }
}

type ParamGrads = Vec<(ParamId, Vec<f32>)>;

fn accumulate(store: &mut ParamStore, grads: &ParamGrads, scale: f64) {
    for (id, g) in grads {
        let dst = store.get_mut(*id).grad.data_mut();
        for (d, &gi) in dst.iter_mut().zip(g) {
            *d = (f64::from(*d) + scale * f64::from(gi)) as f32;
        }
    }
}

fn reset_optimizer(store: &mut ParamStore) {
    for p in store.iter_mut() {
        p.adam_m.data_mut().fill(0.0);
        p.adam_v.data_mut().fill(0.0);
        p.step_count = 0;
        p.zero_grad();
    }
}

fn non_finite(epoch: usize, step: usize, seeds: &[u64], detail: impl ToString) -> PipelineError {
    PipelineError::NonFinite {
        epoch,
        step,
        seeds: seeds.to_vec(),
        detail: detail.to_string(),
    }
}

fn lift(epoch: usize, step: usize, seeds: &[u64]) -> impl Fn(ModelError) -> PipelineError + '_ {
    move |e| match e {
        ModelError::Tensor(t @ TensorError::NonFinite { .. }) => non_finite(epoch, step, seeds, t),
        other => PipelineError::Model(other),
    }
}

fn epoch_order(n: usize, seed: u64, phase: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedKey::new(seed).named(phase).named("order").child(epoch as u64).rng());
    order
}

fn checkpoint_path(dir: &Path, phase: &str, epoch: Option<usize>) -> PathBuf {
    match epoch {
        Some(e) => dir.join(format!("{phase}-epoch{e:04}.dmae")),
        None => dir.join(format!("{phase}.dmae")),
    }
}

fn save(model: &DenoMAE, state: &TrainState, path: &Path) -> Result<()> {
    let value = serde_json::to_value(state).expect("state serializes");
    Checkpoint::new(model.clone(), value).save(path)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: DenoMAE,
    pub state: TrainState,
    /// Mean batch loss of every optimizer step in this call.
    pub step_losses: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

/// Masked-autoencoder pretraining with AdamW (or Adam). Batch gradients are
/// computed per sample in parallel and summed in sample order, so results do
/// not depend on the thread count. Passing the state stored in a checkpoint
/// as `resume` continues that run exactly.
pub fn pretrain(
    mut model: DenoMAE,
    data: &[ModalitySample],
    cfg: &TrainConfig,
    seed: u64,
    resume: Option<TrainState>,
    ckpt_dir: Option<&Path>,
    log: &mut MetricsLog,
) -> Result<PretrainOutcome> {
    const PHASE: &str = "pretrain";
    cfg.validate(PHASE)?;
    if data.is_empty() {
        return Err(PipelineError::Data("empty pretraining set".into()));
    }
    let opt = cfg.adamw()?;
    let mut state = match resume {
        Some(s) => {
            s.check_resumable(PHASE, seed, cfg)?;
            log.truncate_after_epoch(PHASE, s.epochs_done)?;
            TrainState { train: cfg.clone(), ..s }
        }
        None => {
            reset_optimizer(&mut model.params);
            TrainState::fresh(PHASE, seed, cfg)
        }
    };
    model.set_trainable(&[ParamGroup::Encoder, ParamGroup::Decoder]);
    let modalities = model.config.modalities.clone();
    let inputs: Vec<Vec<_>> = data.iter().map(|s| s.select(&modalities)).collect();
    let mut step_losses = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let order = epoch_order(data.len(), seed, PHASE, epoch);
        let mut epoch_loss = 0.0;
        let batches = order.chunks(cfg.batch_size).count();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = state.steps_done;
            let seeds: Vec<u64> = chunk.iter().map(|&i| data[i].seed).collect();
            let mask_key = SeedKey::new(seed).named("mask").child(epoch as u64).child(b as u64);
            let m = &model;
            let results = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let plans = m.pretrain_plans(mask_key.child(j as u64).value())?;
                    let mut tape = Tape::<f32>::new();
                    let fwd = m.pretrain_forward(&mut tape, &m.params, &inputs[i], &plans)?;
                    let total = f64::from(tape.value(fwd.total).data()[0]);
                    let parts: Vec<f64> = fwd.per_modality.iter().map(|&v| f64::from(tape.value(v).data()[0])).collect();
                    let grads = tape.backward(fwd.total)?.into_param_grads();
                    Ok((total, parts, grads))
                })
                .collect::<std::result::Result<Vec<_>, ModelError>>()
                .map_err(lift(epoch, step, &seeds))?;
            model.params.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            let mut parts = vec![0.0; modalities.len()];
            for (total, per, grads) in &results {
                accumulate(&mut model.params, grads, scale);
                loss += total * scale;
                parts.iter_mut().zip(per).for_each(|(a, p)| *a += p * scale);
            }
            if !loss.is_finite() {
                return Err(non_finite(epoch, step, &seeds, "loss"));
            }
            opt.step(&mut model.params, true)?;
            if !model.params.all_finite() {
                return Err(non_finite(epoch, step, &seeds, "parameters after update"));
            }
            log.append(MetricEvent::PretrainStep {
                epoch,
                step,
                loss,
                per_modality: modalities.iter().zip(&parts).map(|(m, &v)| (m.name().to_string(), v)).collect(),
                seeds,
            })?;
            step_losses.push(loss);
            epoch_loss += loss / batches as f64;
            state.steps_done += 1;
        }
        state.epochs_done = epoch + 1;
        log.append(MetricEvent::Epoch {
            phase: PHASE.into(),
            epoch,
            values: vec![("loss".into(), epoch_loss)],
        })?;
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && state.epochs_done % cfg.checkpoint_every == 0 {
                save(&model, &state, &checkpoint_path(dir, PHASE, Some(state.epochs_done)))?;
            }
        }
    }
    let checkpoint = match ckpt_dir {
        Some(dir) => {
            let p = checkpoint_path(dir, PHASE, None);
            save(&model, &state, &p)?;
            Some(p)
        }
        None => None,
    };
    Ok(PretrainOutcome {
        model,
        state,
        step_losses,
        checkpoint,
    })
}

/// Percentage of `samples` whose noisy constellation is classified correctly.
pub fn accuracy(model: &DenoMAE, samples: &[ModalitySample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(PipelineError::Data("accuracy over an empty set".into()));
    }
    let correct = samples
        .par_iter()
        .map(|s| Ok(usize::from(model.predict(s.image(Modality::NoisyConstellation))? == s.label())))
        .collect::<std::result::Result<Vec<usize>, ModelError>>()?
        .into_iter()
        .sum::<usize>();
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochAccuracy {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: DenoMAE,
    pub state: TrainState,
    pub history: Vec<EpochAccuracy>,
    pub checkpoint: Option<PathBuf>,
}

/// Supervised training of the classification head (and the encoder unless
/// the model config freezes it) with softmax cross-entropy. Start from a
/// freshly initialized model for the from-scratch baseline.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    mut model: DenoMAE,
    train: &[ModalitySample],
    test: &[ModalitySample],
    cfg: &TrainConfig,
    seed: u64,
    resume: Option<TrainState>,
    ckpt_dir: Option<&Path>,
    log: &mut MetricsLog,
) -> Result<FinetuneOutcome> {
    const PHASE: &str = "finetune";
    cfg.validate(PHASE)?;
    if train.is_empty() || test.is_empty() {
        return Err(PipelineError::Data("empty fine-tuning split".into()));
    }
    assert_disjoint(train, test)?;
    let classes = model.config.classifier.classes;
    if let Some(s) = train.iter().chain(test).find(|s| s.label() >= classes) {
        return Err(PipelineError::Data(format!(
            "{}: label {} outside {classes} classes",
            s.sample_id,
            s.label()
        )));
    }
    let opt = cfg.adamw()?;
    let mut state = match resume {
        Some(s) => {
            s.check_resumable(PHASE, seed, cfg)?;
            log.truncate_after_epoch(PHASE, s.epochs_done)?;
            TrainState { train: cfg.clone(), ..s }
        }
        None => {
            reset_optimizer(&mut model.params);
            TrainState::fresh(PHASE, seed, cfg)
        }
    };
    if model.config.freeze_encoder {
        model.set_trainable(&[ParamGroup::Head]);
    } else {
        model.set_trainable(&[ParamGroup::Encoder, ParamGroup::Head]);
    }
    let mut history = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let order = epoch_order(train.len(), seed, PHASE, epoch);
        let batches = order.chunks(cfg.batch_size).count();
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = state.steps_done;
            let seeds: Vec<u64> = chunk.iter().map(|&i| train[i].seed).collect();
            let drop_key = SeedKey::new(seed).named("dropout").child(epoch as u64).child(b as u64);
            let m = &model;
            let results = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let s = &train[i];
                    let mut rng = drop_key.child(j as u64).rng();
                    let mut tape = Tape::<f32>::new();
                    let l = m.classification_loss(
                        &mut tape,
                        &m.params,
                        s.image(Modality::NoisyConstellation),
                        s.label(),
                        Some(&mut rng),
                    )?;
                    let loss = f64::from(tape.value(l).data()[0]);
                    Ok((loss, tape.backward(l)?.into_param_grads()))
                })
                .collect::<std::result::Result<Vec<_>, ModelError>>()
                .map_err(lift(epoch, step, &seeds))?;
            model.params.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for (l, grads) in &results {
                accumulate(&mut model.params, grads, scale);
                loss += l * scale;
            }
            if !loss.is_finite() {
                return Err(non_finite(epoch, step, &seeds, "loss"));
            }
            opt.step(&mut model.params, true)?;
            if !model.params.all_finite() {
                return Err(non_finite(epoch, step, &seeds, "parameters after update"));
            }
            log.append(MetricEvent::FinetuneStep { epoch, step, loss, seeds })?;
            epoch_loss += loss / batches as f64;
            state.steps_done += 1;
        }
        state.epochs_done = epoch + 1;
        let row = EpochAccuracy {
            epoch,
            train_loss: epoch_loss,
            train_accuracy: accuracy(&model, train)?,
            test_accuracy: accuracy(&model, test)?,
        };
        log.append(MetricEvent::Epoch {
            phase: PHASE.into(),
            epoch,
            values: vec![
                ("loss".into(), row.train_loss),
                ("train_accuracy".into(), row.train_accuracy),
                ("test_accuracy".into(), row.test_accuracy),
            ],
        })?;
        history.push(row);
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && state.epochs_done % cfg.checkpoint_every == 0 {
                save(&model, &state, &checkpoint_path(dir, PHASE, Some(state.epochs_done)))?;
            }
        }
    }
    let checkpoint = match ckpt_dir {
        Some(dir) => {
            let p = checkpoint_path(dir, PHASE, None);
            save(&model, &state, &p)?;
            Some(p)
        }
        None => None,
    };
    Ok(FinetuneOutcome {
        model,
        state,
        history,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoMAEConfig;
    use crate::modulation::ModulationScheme;
    use crate::pipeline::dataset::{generate_samples, GenSpec, Split};
    use crate::pipeline::{OptimizerKind, RenderConfig};

    fn data(split: Split, n: usize, seed: u64) -> Vec<ModalitySample> {
        generate_samples(&GenSpec {
            split,
            samples: n,
            schemes: vec![ModulationScheme::Bpsk, ModulationScheme::Qam16],
            snr_min: 5.0,
            snr_max: 10.0,
            seed,
            image_side: 32,
            render: RenderConfig::default(),
        })
        .unwrap()
    }

    fn small_model() -> DenoMAE {
        let mut c = DenoMAEConfig::desk();
        c.d_model = 16;
        c.heads = 2;
        c.encoder_layers = 1;
        c.classifier.hidden = 16;
        DenoMAE::new(c, 1).unwrap()
    }

    fn cfg(epochs: usize, opt: OptimizerKind) -> TrainConfig {
        TrainConfig {
            optimizer: opt,
            lr: 1e-3,
            weight_decay: 0.01,
            epochs,
            batch_size: 4,
            checkpoint_every: 1,
        }
    }

    #[test]
    fn steps_per_epoch() {
        let d = data(Split::Pretrain, 10, 1);
        let mut log = MetricsLog::in_memory();
        let out = pretrain(small_model(), &d, &cfg(2, OptimizerKind::Adamw), 3, None, None, &mut log).unwrap();
        // ceil(10 / 4) = 3 optimizer steps per epoch
        assert_eq!(out.state.steps_done, 6);
        assert_eq!(out.step_losses.len(), 6);
        let steps: Vec<usize> = log
            .events()
            .iter()
            .filter_map(|e| match e {
                MetricEvent::PretrainStep { step, .. } => Some(*step),
                _ => None,
            })
            .collect();
        assert_eq!(steps, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = data(Split::Pretrain, 8, 2);
        let dir = tempfile::tempdir().unwrap();
        let (a_dir, b_dir) = (dir.path().join("a"), dir.path().join("b"));
        std::fs::create_dir_all(&a_dir).unwrap();
        std::fs::create_dir_all(&b_dir).unwrap();
        let full = cfg(2, OptimizerKind::Adamw);
        let mut log_a = MetricsLog::open(&a_dir.join("metrics.jsonl")).unwrap();
        pretrain(small_model(), &d, &full, 5, None, Some(&a_dir), &mut log_a).unwrap();

        let mut log_b = MetricsLog::open(&b_dir.join("metrics.jsonl")).unwrap();
        pretrain(small_model(), &d, &full, 5, None, Some(&b_dir), &mut log_b).unwrap();
        // restart from the epoch-1 checkpoint of run b
        let ck = Checkpoint::load(&checkpoint_path(&b_dir, "pretrain", Some(1))).unwrap();
        let state = TrainState::from_checkpoint(&ck).unwrap();
        assert_eq!(state.epochs_done, 1);
        let mut log_b = MetricsLog::open(&b_dir.join("metrics.jsonl")).unwrap();
        pretrain(ck.model, &d, &full, 5, Some(state), Some(&b_dir), &mut log_b).unwrap();

        let fa = std::fs::read(checkpoint_path(&a_dir, "pretrain", None)).unwrap();
        let fb = std::fs::read(checkpoint_path(&b_dir, "pretrain", None)).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(log_a.events(), log_b.events());
        let seqs: Vec<u64> = log_b.records().iter().map(|r| r.seq).collect();
        assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn resume_rejects_other_runs() {
        let d = data(Split::Pretrain, 4, 2);
        let mut log = MetricsLog::in_memory();
        let out = pretrain(small_model(), &d, &cfg(1, OptimizerKind::Adamw), 5, None, None, &mut log).unwrap();
        assert!(pretrain(small_model(), &d, &cfg(2, OptimizerKind::Adamw), 6, Some(out.state), None, &mut log).is_err());
    }

    #[test]
    fn finetune_runs_and_reports() {
        let tr = data(Split::FinetuneTrain, 8, 3);
        let te = data(Split::FinetuneTest, 4, 3);
        let mut log = MetricsLog::in_memory();
        let out = finetune(small_model(), &tr, &te, &cfg(2, OptimizerKind::Adam), 1, None, None, &mut log).unwrap();
        assert_eq!(out.history.len(), 2);
        for h in &out.history {
            assert!((0.0..=100.0).contains(&h.test_accuracy));
        }
        // only encoder and head move
        let before = small_model();
        for (a, b) in out.model.params.iter().zip(before.params.iter()) {
            let moved = a.value != b.value;
            let g = DenoMAE::group_of(&a.name);
            if g == ParamGroup::Decoder {
                assert!(!moved, "{}", a.name);
            }
        }
        assert!(finetune(small_model(), &tr, &tr, &cfg(1, OptimizerKind::Adam), 1, None, None, &mut log).is_err());
    }

    #[test]
    fn frozen_encoder_stays_fixed() {
        let tr = data(Split::FinetuneTrain, 4, 4);
        let te = data(Split::FinetuneTest, 4, 4);
        let mut m = small_model();
        m.config.freeze_encoder = true;
        let before = m.params.clone();
        let mut log = MetricsLog::in_memory();
        let out = finetune(m, &tr, &te, &cfg(1, OptimizerKind::Adam), 1, None, None, &mut log).unwrap();
        for (a, b) in out.model.params.iter().zip(before.iter()) {
            if !a.name.starts_with("head.") {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn single_class_accuracy() {
        // a model whose head always prefers the BPSK class
        let mut m = small_model();
        let b = m.params.find("head.fc2.b").unwrap();
        m.params.get_mut(b).value.data_mut()[ModulationScheme::Bpsk.index()] = 100.0;
        let only_bpsk: Vec<ModalitySample> = data(Split::FinetuneTest, 12, 8)
            .into_iter()
            .filter(|s| s.scheme == ModulationScheme::Bpsk)
            .collect();
        assert!(!only_bpsk.is_empty());
        assert_eq!(accuracy(&m, &only_bpsk).unwrap(), 100.0);
    }

    #[test]
    fn labels_outside_head_rejected() {
        let mut c = small_model().config;
        c.classifier.classes = 2;
        let m = DenoMAE::new(c, 1).unwrap();
        let tr = data(Split::FinetuneTrain, 6, 5);
        let te = data(Split::FinetuneTest, 2, 5);
        let mut log = MetricsLog::in_memory();
        assert!(matches!(
            finetune(m, &tr, &te, &cfg(1, OptimizerKind::Adam), 1, None, None, &mut log),
            Err(PipelineError::Data(_))
        ));
    }
}
