//! Plateau learning-rate reduction and early stopping, as pure state
//! transitions: same (state, input) always yields the same output.
//!
//! Both monitor validation accuracy and treat an increase of at least
//! `min_delta` over the best seen value as improvement.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub floor: f64,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.2,
            floor: 1e-6,
            patience: 2,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlateauState {
    pub best: Option<f64>,
    pub stale: usize,
}

/// Returns the updated state and the (possibly reduced) learning rate.
/// After `patience` non-improving epochs the rate is multiplied by
/// `factor`, clamped at `floor`; a rate already at or below the floor is
/// never raised.
pub fn plateau_update(
    cfg: &PlateauConfig,
    state: &PlateauState,
    metric: f64,
    lr: f64,
) -> (PlateauState, f64) {
    let improved = state.best.is_none_or(|best| metric >= best + cfg.min_delta);
    if improved {
        (
            PlateauState {
                best: Some(metric),
                stale: 0,
            },
            lr,
        )
    } else {
        let stale = state.stale + 1;
        if stale >= cfg.patience {
            let new_lr = if lr > cfg.floor {
                (lr * cfg.factor).max(cfg.floor)
            } else {
                lr
            };
            (
                PlateauState {
                    best: state.best,
                    stale: 0,
                },
                new_lr,
            )
        } else {
            (
                PlateauState {
                    best: state.best,
                    stale,
                },
                lr,
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            patience: 5,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EarlyStopState {
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub stale: usize,
}

/// What the caller must do after an early-stop update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    /// New best epoch: snapshot the weights now.
    Snapshot,
    /// `patience` consecutive stale epochs: stop and restore the snapshot
    /// taken at `best_epoch`.
    StopAndRestore { best_epoch: usize },
}

pub fn early_stop_update(
    cfg: &EarlyStopConfig,
    state: &EarlyStopState,
    epoch: usize,
    metric: f64,
) -> (EarlyStopState, StopDecision) {
    let improved = state.best.is_none_or(|best| metric >= best + cfg.min_delta);
    if improved {
        (
            EarlyStopState {
                best: Some(metric),
                best_epoch: epoch,
                stale: 0,
            },
            StopDecision::Snapshot,
        )
    } else {
        let stale = state.stale + 1;
        let next = EarlyStopState {
            best: state.best,
            best_epoch: state.best_epoch,
            stale,
        };
        if stale >= cfg.patience {
            (
                next,
                StopDecision::StopAndRestore {
                    best_epoch: state.best_epoch,
                },
            )
        } else {
            (next, StopDecision::Continue)
        }
    }
}
