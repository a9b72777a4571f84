//! Loss-driven energy threshold.
//!
//! The threshold is `p = 1 − l^α` where `l ∈ (0, 1)` is the averaged training
//! loss since the previous restart (normalized by the first epoch's average)
//! and `α = epoch / total_epochs + 1` grows from 1 to 2 over training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LOSS_FLOOR: f64 = 1e-6;
pub const DEFAULT_LOSS_CEILING: f64 = 1.0 - 1e-6;

/// Separation strength `epoch / total_epochs + 1`.
pub fn alpha(epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::domain("total_epochs must be at least 1"));
    }
    if epoch > total_epochs {
        return Err(Error::domain(format!(
            "epoch {epoch} beyond total_epochs {total_epochs}"
        )));
    }
    Ok(epoch as f64 / total_epochs as f64 + 1.0)
}

/// Energy threshold `1 − l^α`.
pub fn threshold(l: f64, alpha: f64) -> Result<f64> {
    if !(l > 0.0 && l < 1.0) {
        return Err(Error::domain(format!("loss {l} outside (0, 1)")));
    }
    if !(alpha.is_finite() && alpha >= 1.0) {
        return Err(Error::domain(format!("alpha {alpha} must be finite and >= 1")));
    }
    Ok(1.0 - l.powf(alpha))
}

/// Loss bookkeeping between restarts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    window_losses: Vec<f64>,
    epoch: usize,
    total_epochs: usize,
    pub loss_floor: f64,
    pub loss_ceiling: f64,
    reference_loss: Option<f64>,
}

impl ScheduleState {
    pub fn new(total_epochs: usize) -> Result<Self> {
        Self::with_bounds(total_epochs, DEFAULT_LOSS_FLOOR, DEFAULT_LOSS_CEILING)
    }

    pub fn with_bounds(total_epochs: usize, loss_floor: f64, loss_ceiling: f64) -> Result<Self> {
        if total_epochs == 0 {
            return Err(Error::domain("total_epochs must be at least 1"));
        }
        if !(0.0 < loss_floor && loss_floor < loss_ceiling && loss_ceiling < 1.0) {
            return Err(Error::domain(format!(
                "need 0 < loss_floor < loss_ceiling < 1, got {loss_floor}, {loss_ceiling}"
            )));
        }
        Ok(Self {
            window_losses: Vec::new(),
            epoch: 0,
            total_epochs,
            loss_floor,
            loss_ceiling,
            reference_loss: None,
        })
    }

    /// Records the mean loss of the epoch that just finished.
    ///
    /// The first recorded loss becomes the normalization reference.
    pub fn record_epoch(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::State(format!("epoch loss {loss} is not finite and non-negative")));
        }
        if self.epoch >= self.total_epochs {
            return Err(Error::State("all epochs already recorded".into()));
        }
        self.epoch += 1;
        self.window_losses.push(loss);
        if self.reference_loss.is_none() {
            self.reference_loss = Some(loss);
        }
        Ok(())
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    pub fn window(&self) -> &[f64] {
        &self.window_losses
    }

    pub fn reference_loss(&self) -> Option<f64> {
        self.reference_loss
    }

    /// Overrides the normalization reference.
    pub fn set_reference_loss(&mut self, reference: f64) {
        self.reference_loss = Some(reference);
    }

    pub fn window_mean(&self) -> Result<f64> {
        if self.window_losses.is_empty() {
            return Err(Error::State("no losses recorded since the last restart".into()));
        }
        Ok(self.window_losses.iter().sum::<f64>() / self.window_losses.len() as f64)
    }

    /// `clamp(mean(window) / reference, floor, ceiling)`.
    pub fn normalized_loss(&self) -> Result<f64> {
        let mean = self.window_mean()?;
        let reference = match self.reference_loss {
            Some(r) if r > 0.0 => r,
            Some(r) => return Err(Error::State(format!("reference loss {r} must be positive"))),
            None => return Err(Error::State("no reference loss recorded".into())),
        };
        Ok((mean / reference).clamp(self.loss_floor, self.loss_ceiling))
    }

    /// Threshold for a restart at the current epoch.
    pub fn current_threshold(&self) -> Result<(f64, f64, f64)> {
        let l = self.normalized_loss()?;
        let a = alpha(self.epoch, self.total_epochs)?;
        Ok((threshold(l, a)?, a, l))
    }

    /// Empties the loss window and returns what it held.
    pub fn take_window(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.window_losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_endpoints() {
        assert_eq!(alpha(0, 100).unwrap(), 1.0);
        assert_eq!(alpha(50, 100).unwrap(), 1.5);
        assert_eq!(alpha(100, 100).unwrap(), 2.0);
        assert!(matches!(alpha(101, 100), Err(Error::Domain(_))));
        assert!(matches!(alpha(0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn alpha_steps_are_affine() {
        for total in [1usize, 3, 7, 10, 100, 997] {
            let step = 1.0 / total as f64;
            for e in 0..total {
                let diff = alpha(e + 1, total).unwrap() - alpha(e, total).unwrap();
                assert!((diff - step).abs() <= 1e-15, "T={total} e={e}");
            }
        }
    }

    #[test]
    fn threshold_values() {
        assert_eq!(threshold(0.25, 1.5).unwrap(), 0.875);
        assert_eq!(threshold(0.5, 1.0).unwrap(), 0.5);
        let near_one = threshold(1.0 - 1e-9, 1.0).unwrap();
        assert!(near_one > 0.0 && near_one < 1e-8);
        assert!(threshold(1.0, 1.5).is_err());
        assert!(threshold(0.0, 1.5).is_err());
        assert!(threshold(0.5, 0.9).is_err());
    }

    #[test]
    fn normalized_loss_cases() {
        let mut s = ScheduleState::new(10).unwrap();
        assert!(matches!(s.normalized_loss(), Err(Error::State(_))));
        s.record_epoch(2.0).unwrap();
        assert_eq!(s.normalized_loss().unwrap(), DEFAULT_LOSS_CEILING);

        s.take_window();
        s.record_epoch(0.75).unwrap();
        s.record_epoch(0.25).unwrap();
        assert_eq!(s.normalized_loss().unwrap(), 0.25);

        s.take_window();
        s.record_epoch(0.0).unwrap();
        assert_eq!(s.normalized_loss().unwrap(), DEFAULT_LOSS_FLOOR);
    }

    #[test]
    fn window_is_emptied_only_on_take() {
        let mut s = ScheduleState::new(5).unwrap();
        for l in [3.0, 2.0, 1.0] {
            s.record_epoch(l).unwrap();
        }
        assert_eq!(s.window().len(), 3);
        assert_eq!(s.take_window(), vec![3.0, 2.0, 1.0]);
        assert!(s.window().is_empty());
        assert_eq!(s.reference_loss(), Some(3.0));
        assert_eq!(s.epoch(), 3);
    }

    #[test]
    fn rejects_bad_losses() {
        let mut s = ScheduleState::new(2).unwrap();
        assert!(s.record_epoch(f64::NAN).is_err());
        assert!(s.record_epoch(-1.0).is_err());
        s.record_epoch(1.0).unwrap();
        s.record_epoch(1.0).unwrap();
        assert!(s.record_epoch(1.0).is_err());
    }
}
