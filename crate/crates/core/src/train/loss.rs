//! Loss configuration and non-tape loss evaluation for metrics.
//!
//! The differentiable path lives on the tape (`cross_entropy_probs`,
//! `binary_cross_entropy_probs`); the helpers here compute the same values
//! for validation/test metrics where no gradient is needed.

use thiserror::Error;

use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("probs shape {shape:?} does not fit {labels} labels")]
    ShapeMismatch { shape: Vec<usize>, labels: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax probabilities against smoothed one-hot targets.
    Categorical,
    /// Single sigmoid probability against a binary label.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Label smoothing for the categorical loss; the binary loss ignores it.
    pub smoothing: f64,
}

impl LossConfig {
    pub fn categorical(smoothing: f64) -> Self {
        LossConfig {
            kind: LossKind::Categorical,
            smoothing,
        }
    }

    pub fn binary() -> Self {
        LossConfig {
            kind: LossKind::Binary,
            smoothing: 0.0,
        }
    }
}

const LOG_CLAMP: f64 = 1e-12;

/// Smoothed target vector: `onehot*(1-alpha) + alpha/K`.
pub fn smoothed_targets(classes: usize, label: usize, alpha: f64) -> Vec<f64> {
    let off = alpha / classes as f64;
    let on = 1.0 - alpha + off;
    (0..classes).map(|k| if k == label { on } else { off }).collect()
}

/// Batch-mean smoothed cross-entropy over probability rows, log clamped at
/// 1e-12. Metric-path twin of the tape op.
pub fn smoothed_cross_entropy<E: Element>(
    probs: &Tensor<E>,
    labels: &[usize],
    alpha: f64,
) -> Result<f64, LossError> {
    if probs.rank() != 2 || probs.rows() != labels.len() {
        return Err(LossError::ShapeMismatch {
            shape: probs.shape().to_vec(),
            labels: labels.len(),
        });
    }
    let k = probs.cols();
    let mut total = 0.0f64;
    for (row, &label) in probs.data().chunks_exact(k).zip(labels) {
        if label >= k {
            return Err(LossError::LabelOutOfRange { label, classes: k });
        }
        let target = smoothed_targets(k, label, alpha);
        for (&p, t) in row.iter().zip(target) {
            total -= t * p.as_f64().max(LOG_CLAMP).ln();
        }
    }
    Ok(total / labels.len() as f64)
}

/// Batch-mean binary cross-entropy; probabilities clamped to
/// `[1e-12, 1-1e-12]`.
pub fn binary_cross_entropy<E: Element>(
    probs: &Tensor<E>,
    labels: &[usize],
) -> Result<f64, LossError> {
    if probs.numel() != labels.len() {
        return Err(LossError::ShapeMismatch {
            shape: probs.shape().to_vec(),
            labels: labels.len(),
        });
    }
    let mut total = 0.0f64;
    for (&p, &y) in probs.data().iter().zip(labels) {
        if y > 1 {
            return Err(LossError::LabelOutOfRange { label: y, classes: 2 });
        }
        let p = p.as_f64().clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / labels.len() as f64)
}

/// Record the configured loss on the tape, returning the scalar node.
pub fn attach_loss<E: Element>(
    tape: &mut Tape<E>,
    probs: NodeId,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    match cfg.kind {
        LossKind::Categorical => Ok(tape.cross_entropy_probs(probs, labels, cfg.smoothing)?),
        LossKind::Binary => {
            let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
            Ok(tape.binary_cross_entropy_probs(probs, &bytes)?)
        }
    }
}

/// Metric-path loss matching [`attach_loss`].
pub fn eval_loss<E: Element>(
    probs: &Tensor<E>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    match cfg.kind {
        LossKind::Categorical => smoothed_cross_entropy(probs, labels, cfg.smoothing),
        LossKind::Binary => binary_cross_entropy(probs, labels),
    }
}

/// Predicted class ids: argmax per row (categorical) or the 0.5 gate
/// (binary).
pub fn predictions<E: Element>(probs: &Tensor<E>, kind: LossKind) -> Vec<usize> {
    match kind {
        LossKind::Categorical => {
            let k = probs.cols();
            probs
                .data()
                .chunks_exact(k)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                        .map(|(i, _)| i)
                        .unwrap_or(0)
                })
                .collect()
        }
        LossKind::Binary => probs
            .data()
            .iter()
            .map(|&p| usize::from(p.as_f64() >= 0.5))
            .collect(),
    }
}

pub fn accuracy_of(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
