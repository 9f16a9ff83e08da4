//! Evaluation: confusion matrices, accuracy/F1, fold plans, and the
//! cross-validated training harness.

pub mod confusion;
pub mod crossval;
pub mod kfold;

use thiserror::Error;

pub use confusion::{confusion, ConfusionMatrix};
pub use crossval::{aggregate, crossval_run, run_crossval, FoldMetrics, FoldRunner, RunAggregate};
pub use kfold::{kfold_plan, FoldPlan, FoldSplit};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("metric undefined on an empty matrix")]
    EmptyMatrix,
    #[error("fold {fold} failed: {message}")]
    FoldFailed { fold: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}
