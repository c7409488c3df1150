use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One-cycle learning rate: a linear ramp from `base/10` up to `base` at the
/// middle of the cycle, back down to `base/10` at its end, then a linear
/// decay to `base/100` at the final epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub cycle_epochs: f64,
    pub total_epochs: f64,
}

impl LrSchedule {
    pub fn new(base: f64, cycle_epochs: f64, total_epochs: f64) -> Result<Self> {
        if !(base > 0.0 && cycle_epochs > 0.0 && total_epochs > 0.0) {
            return Err(Error::Config(format!(
                "schedule needs positive base/cycle/total, got {}/{}/{}",
                base, cycle_epochs, total_epochs
            )));
        }
        if cycle_epochs > total_epochs {
            return Err(Error::Config(format!(
                "cycle of {} epochs exceeds {} total",
                cycle_epochs, total_epochs
            )));
        }
        Ok(Self {
            base,
            cycle_epochs,
            total_epochs,
        })
    }

    /// Learning rate at a (fractional) epoch in `[0, total]`.
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if !(0.0..=self.total_epochs).contains(&epoch) {
            return Err(Error::Contract(format!(
                "epoch {} outside [0, {}]",
                epoch, self.total_epochs
            )));
        }
        let (lo, hi, end) = (self.base / 10.0, self.base, self.base / 100.0);
        let half = self.cycle_epochs / 2.0;
        let lr = if epoch <= half {
            lo + (hi - lo) * epoch / half
        } else if epoch <= self.cycle_epochs {
            hi - (hi - lo) * (epoch - half) / half
        } else {
            let tail = self.total_epochs - self.cycle_epochs;
            lo - (lo - end) * (epoch - self.cycle_epochs) / tail
        };
        Ok(lr)
    }
}
