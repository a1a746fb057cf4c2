use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear exploration schedule from `start` to `end` over `decay_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.1,
            decay_steps: 1_000_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start <= 1.0 && self.start >= self.end && self.end >= 0.0) || self.decay_steps == 0 {
            return Err(Error::Config(format!(
                "epsilon schedule needs 1 >= start >= end >= 0 and decay_steps > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn epsilon_at(&self, global_step: u64) -> f64 {
        let frac = (global_step as f64 / self.decay_steps as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }

    /// Same slope and floor, starting from `start` instead.
    pub fn restarted(&self, start: f64) -> EpsilonSchedule {
        let start = start.min(self.start).max(self.end);
        let slope = (self.start - self.end) / self.decay_steps as f64;
        let decay_steps = if slope > 0.0 {
            (((start - self.end) / slope).round() as u64).max(1)
        } else {
            self.decay_steps
        };
        EpsilonSchedule {
            start,
            end: self.end,
            decay_steps,
        }
    }
}
