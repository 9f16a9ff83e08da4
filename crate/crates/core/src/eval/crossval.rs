//! Cross-validated training runs and their mean/std aggregation.
//!
//! Folds are independent: each gets a fresh seeded init and optimizer and
//! they run concurrently on the rayon pool; aggregation is a sequential
//! reduce in fold order afterwards.

use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::eval::kfold::{FoldPlan, FoldSplit};
use crate::eval::EvalError;
use crate::model::{ModelSpec, Parameters};
use crate::rng::RngState;
use crate::train::{evaluate, fit, TrainConfig, TrainError};

/// Metrics of one trained fold; losses/accuracies are measured with the
/// final (restored-best) weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldMetrics {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub epoch_seconds_mean: f64,
    pub epochs_run: usize,
}

/// Arithmetic mean and population standard deviation of fold values.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64), EvalError> {
    if values.is_empty() {
        return Err(EvalError::Invalid("aggregate of no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// The seven reported metrics, each as (mean, std) over folds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunAggregate {
    pub train_loss: (f64, f64),
    pub train_acc: (f64, f64),
    pub val_loss: (f64, f64),
    pub val_acc: (f64, f64),
    pub test_loss: (f64, f64),
    pub test_acc: (f64, f64),
    pub epoch_seconds: (f64, f64),
}

impl RunAggregate {
    pub fn from_folds(folds: &[FoldMetrics]) -> Result<RunAggregate, EvalError> {
        let pick = |f: fn(&FoldMetrics) -> f64| -> Vec<f64> { folds.iter().map(f).collect() };
        Ok(RunAggregate {
            train_loss: aggregate(&pick(|m| m.train_loss))?,
            train_acc: aggregate(&pick(|m| m.train_acc))?,
            val_loss: aggregate(&pick(|m| m.val_loss))?,
            val_acc: aggregate(&pick(|m| m.val_acc))?,
            test_loss: aggregate(&pick(|m| m.test_loss))?,
            test_acc: aggregate(&pick(|m| m.test_acc))?,
            epoch_seconds: aggregate(&pick(|m| m.epoch_seconds_mean))?,
        })
    }
}

/// Trains and evaluates one fold. The production implementation does real
/// training; tests may substitute stubs.
pub trait FoldRunner: Sync {
    fn run_fold(&self, fold_index: usize, split: &FoldSplit) -> Result<FoldMetrics, TrainError>;
}

/// Run every fold of the plan (concurrently) and aggregate.
pub fn run_crossval(
    plan: &FoldPlan,
    runner: &dyn FoldRunner,
) -> Result<(RunAggregate, Vec<FoldMetrics>), EvalError> {
    let results: Vec<Result<FoldMetrics, TrainError>> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(i, split)| runner.run_fold(i, split))
        .collect();
    let mut folds = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        folds.push(r.map_err(|e| EvalError::FoldFailed {
            fold: i,
            message: e.to_string(),
        })?);
    }
    let agg = RunAggregate::from_folds(&folds)?;
    Ok((agg, folds))
}

struct TrainingFoldRunner<'a> {
    spec: &'a ModelSpec,
    data: &'a LabeledDataset,
    cfg: &'a TrainConfig,
}

impl FoldRunner for TrainingFoldRunner<'_> {
    fn run_fold(&self, fold_index: usize, split: &FoldSplit) -> Result<FoldMetrics, TrainError> {
        // Fresh seeded init and an independent seed stream per fold.
        let fold_seed = RngState::new(self.cfg.seed).derive(90_000 + fold_index as u64);
        let params: Parameters<f32> = Parameters::init(self.spec, fold_seed);
        let mut cfg = self.cfg.clone();
        cfg.seed = fold_seed.seed;
        cfg.checkpoint_path = None;
        let out = fit(
            self.spec,
            params,
            self.data,
            &split.train,
            &split.validation,
            &cfg,
            |_| {},
        )?;
        let train = evaluate(self.spec, &out.params, self.data, &split.train, &cfg.loss, cfg.batch_size)?;
        let val = evaluate(self.spec, &out.params, self.data, &split.validation, &cfg.loss, cfg.batch_size)?;
        let test = evaluate(self.spec, &out.params, self.data, &split.test, &cfg.loss, cfg.batch_size)?;
        let secs: Vec<f64> = out.records.iter().map(|r| r.seconds).collect();
        Ok(FoldMetrics {
            train_loss: train.loss,
            train_acc: train.accuracy,
            val_loss: val.loss,
            val_acc: val.accuracy,
            test_loss: test.loss,
            test_acc: test.accuracy,
            epoch_seconds_mean: secs.iter().sum::<f64>() / secs.len().max(1) as f64,
            epochs_run: out.records.len(),
        })
    }
}

/// The full protocol: plan, per-fold training with callbacks, evaluation of
/// the test fold, mean/std aggregation.
pub fn crossval_run(
    spec: &ModelSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    k: usize,
    val_fraction: f64,
) -> Result<(RunAggregate, Vec<FoldMetrics>), EvalError> {
    let plan = kfold_plan_for(data.len(), k, val_fraction, RngState::new(cfg.seed))?;
    let runner = TrainingFoldRunner { spec, data, cfg };
    run_crossval(&plan, &runner)
}

fn kfold_plan_for(
    n: usize,
    k: usize,
    val_fraction: f64,
    seed: RngState,
) -> Result<FoldPlan, EvalError> {
    crate::eval::kfold::kfold_plan(n, k, val_fraction, seed)
}
