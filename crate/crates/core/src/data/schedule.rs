use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    InverseIteration,
}

/// Step-size schedule, independent of the batch size.
///
/// Iterations are indexed from 0. `InverseIteration` uses `scale / (k + 1)`
/// at iteration `k`, so the first step has magnitude `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRateSchedule {
    pub kind: ScheduleKind,
    pub scale: f64,
}

impl LearningRateSchedule {
    pub fn new(kind: ScheduleKind, scale: f64) -> Result<Self> {
        let s = Self { kind, scale };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(scale: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            scale,
        }
    }

    pub fn inverse_iteration(scale: f64) -> Self {
        Self {
            kind: ScheduleKind::InverseIteration,
            scale,
        }
    }

    /// A zero scale is accepted (the iterate freezes).
    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(invalid("schedule.scale", format!("must be finite and >= 0, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn rate(&self, iteration: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.scale,
            ScheduleKind::InverseIteration => self.scale / (iteration as f64 + 1.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_iteration_starts_at_scale() {
        let s = LearningRateSchedule::inverse_iteration(0.5);
        assert_eq!(s.rate(0), 0.5);
        assert_eq!(s.rate(1), 0.25);
        assert_eq!(s.rate(9), 0.05);
    }

    #[test]
    fn rejects_negative_scale() {
        assert!(LearningRateSchedule::new(ScheduleKind::Constant, -1.0).is_err());
        assert!(LearningRateSchedule::new(ScheduleKind::Constant, f64::NAN).is_err());
        assert!(LearningRateSchedule::new(ScheduleKind::Constant, 0.0).is_ok());
    }
}
