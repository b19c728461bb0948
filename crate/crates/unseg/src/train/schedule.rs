//! Cosine annealing: one half-cosine from lr_max down to lr_min across the
//! whole training horizon, stepped per batch, no restarts.

use crate::error::{Error, Result};

/// `lr = lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi * step / total))`
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::OutOfRange {
            step,
            total: total_steps,
        });
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Training stops once the validation loss has failed to improve for
/// `patience` consecutive epochs. Improvement means strictly lower by at
/// least `min_delta` (a float-noise guard).
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            min_delta: 1e-6,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Record one epoch's validation loss; returns `(improved, should_stop)`.
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        let improved = val_loss < self.best - self.min_delta;
        if improved {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}
