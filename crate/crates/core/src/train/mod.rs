//! The training loop: per-batch forward/backward + optimizer step, epoch
//! metrics, plateau and early-stop callbacks, best-weight checkpointing.

pub mod callbacks;
pub mod checkpoint;
pub mod loss;
pub mod radam;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

pub use callbacks::{
    early_stop_update, plateau_update, EarlyStopConfig, EarlyStopState, PlateauConfig,
    PlateauState, StopDecision,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use loss::{
    accuracy_of, attach_loss, binary_cross_entropy, eval_loss, predictions,
    smoothed_cross_entropy, smoothed_targets, LossConfig, LossError, LossKind,
};
pub use radam::{RAdamConfig, RAdamState};

use crate::data::{augment, batch_tensor, make_batches, normalize_batch, AugmentConfig, DataError, Image, LabeledDataset};
use crate::model::{self, ForwardCtx, ModelError, ModelSpec, Parameters, Phase, Task};
use crate::rng::RngState;
use crate::tape::TapeError;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss in epoch {epoch}, batch {batch_index} (first bad tensor: {tensor})")]
    NonFiniteLoss {
        epoch: usize,
        batch_index: usize,
        tensor: String,
    },
    #[error("non-finite parameter {tensor} after epoch {epoch}")]
    NonFiniteParams { epoch: usize, tensor: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub loss: LossConfig,
    pub optimizer: RAdamConfig,
    /// `None` disables the plateau callback.
    pub plateau: Option<PlateauConfig>,
    /// `None` disables early stopping (best-weight tracking still runs).
    pub early_stop: Option<EarlyStopConfig>,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
    /// Best-epoch weights are written here whenever validation accuracy
    /// improves.
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainConfig {
    /// Protocol defaults: lr 1e-4, batch 32, smoothing 0.2 (categorical),
    /// plateau factor 0.2 with floor 1e-6, early-stop patience 5.
    pub fn defaults_for(task: Task, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            loss: match task {
                Task::Age8 => LossConfig::categorical(0.2),
                Task::Gender2 => LossConfig::binary(),
            },
            optimizer: RAdamConfig::default(),
            plateau: Some(PlateauConfig::default()),
            early_stop: Some(EarlyStopConfig::default()),
            augment: None,
            seed,
            checkpoint_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.seconds
        )
    }
}

pub struct FitOutcome<E: Element> {
    pub params: Parameters<E>,
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

fn assemble_batch<E: Element>(
    data: &LabeledDataset,
    ids: &[usize],
    augment_cfg: Option<(&AugmentConfig, &mut rand_chacha::ChaCha8Rng)>,
) -> (Tensor<E>, Vec<usize>) {
    let labels: Vec<usize> = ids.iter().map(|&i| data.labels[i]).collect();
    let raw = match augment_cfg {
        Some((cfg, rng)) => {
            let owned: Vec<Image> = ids.iter().map(|&i| augment(&data.images[i], cfg, rng)).collect();
            let refs: Vec<&Image> = owned.iter().collect();
            batch_tensor::<E>(&refs)
        }
        None => {
            let refs: Vec<&Image> = ids.iter().map(|&i| &data.images[i]).collect();
            batch_tensor::<E>(&refs)
        }
    };
    (normalize_batch(&raw), labels)
}

/// Find a name to blame for a non-finite loss: the first non-finite
/// parameter if any, otherwise the loss node itself.
fn blame_tensor<E: Element>(params: &Parameters<E>) -> String {
    match params.validate_finite() {
        Err(crate::tensor::TensorError::NonFinite { context, .. }) => context,
        _ => "loss".to_string(),
    }
}

/// One pass over the training ids in seeded-shuffle order: forward (train
/// mode), loss, backward, optimizer step per batch. Returns
/// (mean sample loss, accuracy); loss is accumulated per sample so the
/// value is independent of batch boundaries.
///
/// Batch composition is fixed by `shuffle_seed`: with the same seed,
/// parameters, and no augmentation, repeated epochs reproduce the same
/// loss bit for bit (batch norm couples samples within a batch, so the
/// order must match for that to hold).
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<E: Element>(
    spec: &ModelSpec,
    params: &mut Parameters<E>,
    opt: &mut RAdamState<E>,
    data: &LabeledDataset,
    ids: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    shuffle_seed: RngState,
    augment_seed: RngState,
) -> Result<(f64, f64), TrainError> {
    if ids.is_empty() {
        return Err(TrainError::Invalid("empty training id set".into()));
    }
    let batches = make_batches(ids.len(), cfg.batch_size, shuffle_seed);
    let mut augment_rng = augment_seed.stream();
    let mut loss_sum = 0.0f64;
    let mut hits = 0usize;

    for (batch_index, positions) in batches.iter().enumerate() {
        let batch_ids: Vec<usize> = positions.iter().map(|&p| ids[p]).collect();
        let (batch, labels) = assemble_batch::<E>(
            data,
            &batch_ids,
            cfg.augment.as_ref().map(|a| (a, &mut augment_rng)),
        );
        let pass = model::forward(spec, params, &batch, ForwardCtx::new(Phase::Train))?;
        let mut tape = pass.tape;
        let loss_node = attach_loss(&mut tape, pass.probs, &labels, &cfg.loss)?;
        let loss = tape.value(loss_node).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch_index,
                tensor: blame_tensor(params),
            });
        }
        let preds = predictions(tape.value(pass.probs), cfg.loss.kind);
        hits += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        loss_sum += loss * labels.len() as f64;

        let grads = tape.backward(loss_node)?;
        let mut grad_map: BTreeMap<String, Tensor<E>> = BTreeMap::new();
        for (name, &node) in &pass.param_nodes {
            if let Some(g) = grads.get(node) {
                grad_map.insert(name.clone(), g.clone());
            }
        }
        opt.step(params, &grad_map);
        model::apply_bn_updates(params, pass.bn_updates);
    }

    Ok((loss_sum / ids.len() as f64, hits as f64 / ids.len() as f64))
}

pub struct EvalOutcome {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Inference over `ids` in fixed order; batch composition does not affect
/// the metrics beyond dtype rounding.
pub fn evaluate<E: Element>(
    spec: &ModelSpec,
    params: &Parameters<E>,
    data: &LabeledDataset,
    ids: &[usize],
    loss_cfg: &LossConfig,
    batch_size: usize,
) -> Result<EvalOutcome, TrainError> {
    if ids.is_empty() {
        return Err(TrainError::Invalid("empty evaluation id set".into()));
    }
    let mut loss_sum = 0.0f64;
    let mut preds = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch_size.max(1)) {
        let (batch, chunk_labels) = assemble_batch::<E>(data, chunk, None);
        let pass = model::forward(spec, params, &batch, ForwardCtx::new(Phase::Infer))?;
        let probs = pass.probs_tensor();
        loss_sum += eval_loss(probs, &chunk_labels, loss_cfg)? * chunk_labels.len() as f64;
        preds.extend(predictions(probs, loss_cfg.kind));
        labels.extend(chunk_labels);
    }
    Ok(EvalOutcome {
        loss: loss_sum / ids.len() as f64,
        accuracy: accuracy_of(&preds, &labels),
        predictions: preds,
        labels,
    })
}

/// Full training run with callbacks. Early stopping restores the
/// best-epoch snapshot bit for bit; the best weights are also checkpointed
/// whenever validation accuracy improves.
pub fn fit<E: Element>(
    spec: &ModelSpec,
    mut params: Parameters<E>,
    data: &LabeledDataset,
    train_ids: &[usize],
    val_ids: &[usize],
    cfg: &TrainConfig,
    mut epoch_sink: impl FnMut(&EpochRecord),
) -> Result<FitOutcome<E>, TrainError> {
    if val_ids.is_empty() {
        return Err(TrainError::Invalid("empty validation id set".into()));
    }
    let mut opt = RAdamState::<E>::new(cfg.lr, cfg.optimizer);
    let mut plateau_state = PlateauState::default();
    // Best-weight tracking always runs; the stop rule only when enabled.
    let stop_cfg = cfg.early_stop.unwrap_or(EarlyStopConfig {
        patience: usize::MAX,
        ..EarlyStopConfig::default()
    });
    let mut stop_state = EarlyStopState::default();
    let mut snapshot: Option<Parameters<E>> = None;
    let mut records = Vec::new();
    let mut stopped_early = false;

    // One batch order per run; augmentation draws fresh randomness each
    // epoch.
    let shuffle_seed = RngState::new(cfg.seed).derive(1);
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let augment_seed = RngState::new(cfg.seed).derive(1000 + epoch as u64);
        let (train_loss, train_acc) = train_epoch(
            spec,
            &mut params,
            &mut opt,
            data,
            train_ids,
            cfg,
            epoch,
            shuffle_seed,
            augment_seed,
        )?;
        let val = evaluate(spec, &params, data, val_ids, &cfg.loss, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss: val.loss,
            val_acc: val.accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        epoch_sink(&record);
        records.push(record);

        if let Err(crate::tensor::TensorError::NonFinite { context, .. }) = params.validate_finite()
        {
            return Err(TrainError::NonFiniteParams {
                epoch,
                tensor: context,
            });
        }

        if let Some(pcfg) = &cfg.plateau {
            let (next, new_lr) = plateau_update(pcfg, &plateau_state, val.accuracy, opt.lr);
            plateau_state = next;
            opt.lr = new_lr;
        }

        let (next, decision) = early_stop_update(&stop_cfg, &stop_state, epoch, val.accuracy);
        stop_state = next;
        match decision {
            StopDecision::Snapshot => {
                snapshot = Some(params.clone());
                if let Some(path) = &cfg.checkpoint_path {
                    save_checkpoint(path, spec, &params)?;
                }
            }
            StopDecision::StopAndRestore { .. } if cfg.early_stop.is_some() => {
                if let Some(best) = snapshot.take() {
                    params = best;
                }
                stopped_early = true;
                break;
            }
            _ => {}
        }
    }

    Ok(FitOutcome {
        params,
        records,
        stopped_early,
        best_epoch: stop_state.best_epoch,
        best_val_acc: stop_state.best.unwrap_or(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, SynthConfig};
    use crate::model::Preset;

    fn toy_setup(n: usize, seed: u64) -> (ModelSpec, Parameters<f32>, LabeledDataset) {
        let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
        let params = Parameters::init(&spec, RngState::new(seed));
        let data = synthesize_dataset(&SynthConfig {
            n,
            classes: 8,
            image_size: 32,
            seed,
        })
        .unwrap()
        .to_labeled();
        (spec, params, data)
    }

    #[test]
    fn zero_lr_epoch_leaves_params_unchanged_and_loss_flat() {
        let (spec, mut params, data) = toy_setup(16, 3);
        let reference = params.clone();
        let mut cfg = TrainConfig::defaults_for(Task::Age8, 3);
        cfg.lr = 0.0;
        cfg.batch_size = 8;
        let ids: Vec<usize> = (0..16).collect();
        let mut opt = RAdamState::<f32>::new(0.0, cfg.optimizer);
        let shuffle = RngState::new(10);
        let (loss1, _) = train_epoch(
            &spec, &mut params, &mut opt, &data, &ids, &cfg, 1, shuffle, RngState::new(20),
        )
        .unwrap();
        // Running statistics move; the learnable tensors must not.
        for name in reference.names() {
            if name.ends_with("_rm") || name.ends_with("_rv") || name.ends_with("_n") {
                continue;
            }
            assert_eq!(
                params.get(name).data(),
                reference.get(name).data(),
                "{name} changed under lr 0"
            );
        }
        let (loss2, _) = train_epoch(
            &spec, &mut params, &mut opt, &data, &ids, &cfg, 2, shuffle, RngState::new(21),
        )
        .unwrap();
        // Identical parameters and batch order: the loss is exactly flat.
        assert_eq!(loss1, loss2);
    }

    #[test]
    fn epoch_record_fields_are_populated() {
        let (spec, params, data) = toy_setup(12, 5);
        let mut cfg = TrainConfig::defaults_for(Task::Age8, 5);
        cfg.max_epochs = 2;
        cfg.batch_size = 6;
        cfg.plateau = None;
        cfg.early_stop = None;
        let train_ids: Vec<usize> = (0..8).collect();
        let val_ids: Vec<usize> = (8..12).collect();
        let mut seen = Vec::new();
        let out = fit(&spec, params, &data, &train_ids, &val_ids, &cfg, |r| {
            seen.push(*r)
        })
        .unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(seen.len(), 2);
        for (i, r) in out.records.iter().enumerate() {
            assert_eq!(r.epoch, i + 1);
            assert!(r.train_loss.is_finite() && r.train_loss >= 0.0);
            assert!((0.0..=1.0).contains(&r.train_acc));
            assert!(r.val_loss.is_finite() && r.val_loss >= 0.0);
            assert!((0.0..=1.0).contains(&r.val_acc));
            assert!(r.seconds >= 0.0);
        }
    }

    #[test]
    fn training_is_deterministic_under_fixed_seed() {
        let run = || {
            let (spec, params, data) = toy_setup(16, 9);
            let mut cfg = TrainConfig::defaults_for(Task::Age8, 9);
            cfg.max_epochs = 2;
            cfg.batch_size = 8;
            cfg.lr = 1e-3;
            let train_ids: Vec<usize> = (0..12).collect();
            let val_ids: Vec<usize> = (12..16).collect();
            fit(&spec, params, &data, &train_ids, &val_ids, &cfg, |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.params.bitwise_eq(&b.params));
        assert_eq!(a.records, b.records.iter().enumerate().map(|(i, r)| EpochRecord { seconds: a.records[i].seconds, ..*r }).collect::<Vec<_>>());
    }

    #[test]
    fn early_stop_restores_best_weights_bit_for_bit() {
        // Zero learning rate makes validation accuracy flat, so the stop
        // fires after exactly `patience` stale epochs and the restored
        // weights equal the epoch-1 snapshot (which zero lr never moved).
        let (spec, params, data) = toy_setup(16, 13);
        let reference = params.clone();
        let mut cfg = TrainConfig::defaults_for(Task::Age8, 13);
        cfg.lr = 0.0;
        cfg.max_epochs = 50;
        cfg.batch_size = 8;
        cfg.plateau = None;
        cfg.early_stop = Some(EarlyStopConfig {
            patience: 5,
            min_delta: 1e-4,
        });
        let train_ids: Vec<usize> = (0..12).collect();
        let val_ids: Vec<usize> = (12..16).collect();
        let out = fit(&spec, params, &data, &train_ids, &val_ids, &cfg, |_| {}).unwrap();
        assert!(out.stopped_early);
        // Epoch 1 improves (from none); epochs 2..=6 are stale.
        assert_eq!(out.records.len(), 6);
        assert_eq!(out.best_epoch, 1);
        for name in reference.names() {
            if name.ends_with("_rm") || name.ends_with("_rv") || name.ends_with("_n") {
                continue;
            }
            assert_eq!(params_data(&out.params, name), params_data(&reference, name), "{name}");
        }
    }

    fn params_data<'a>(p: &'a Parameters<f32>, name: &str) -> &'a [f32] {
        p.get(name).data()
    }
}
