use serde::{Deserialize, Serialize};

/// Step decay: `base * factor^floor(epoch / every)`.
///
/// When `1/factor` is an integer (0.1, 0.5, ...) the rate is computed by
/// division so that e.g. `1e-3` decays to exactly `1e-4` and `1e-5`.
pub fn step_decay(base: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    let n = (epoch / every.max(1)) as i32;
    let inv = 1.0 / factor;
    if inv.fract() == 0.0 {
        base / inv.powi(n)
    } else {
        base * factor.powi(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based early stopping on a loss that should decrease.
///
/// Epochs are counted from 1. Training stops once `patience` consecutive
/// epochs have passed without a strict improvement of the best loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
        }
    }

    /// Record this epoch's loss. Returns whether it is a new best together
    /// with the continue/stop decision.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, StopDecision) {
        let improved = loss < self.best_loss;
        if improved {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        let decision = if self.epochs_since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        (improved, decision)
    }
}
