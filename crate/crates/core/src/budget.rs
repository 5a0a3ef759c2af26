use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the discretized latency sum is compared against the budget grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintSense {
    /// Sum of units strictly below `P`, i.e. at most `P - 1`.
    #[default]
    Strict,
    /// Sum of units at most `P`.
    Inclusive,
}

/// Latency budget `T0` in milliseconds and its discretization into `P` units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub t0_ms: f64,
    pub levels: u64,
    pub sense: ConstraintSense,
}

impl BudgetSpec {
    /// `levels` defaults to `10 * T0` (one unit per 0.1 ms).
    pub fn new(t0_ms: f64, levels: Option<u64>, sense: ConstraintSense) -> Result<Self> {
        if !(t0_ms.is_finite() && t0_ms > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "latency budget must be positive, got {t0_ms}"
            )));
        }
        let levels = match levels {
            Some(0) => return Err(Error::InvalidArgument("discretization level must be >= 1".into())),
            Some(p) => p,
            None => default_levels(t0_ms),
        };
        Ok(BudgetSpec { t0_ms, levels, sense })
    }

    /// Largest admissible discretized latency sum.
    pub fn capacity(&self) -> u64 {
        match self.sense {
            ConstraintSense::Strict => self.levels - 1,
            ConstraintSense::Inclusive => self.levels,
        }
    }

    pub fn units(&self, latency_ms: f64) -> u64 {
        crate::tables::discretize_value(latency_ms, self.t0_ms, self.levels)
    }
}

/// `floor(10 * T0)` clamped to at least one level.
pub fn default_levels(t0_ms: f64) -> u64 {
    // The small slack keeps decimal budgets such as 0.3 ms from landing one
    // level short after the binary multiplication.
    ((10.0 * t0_ms + 1e-9).floor() as u64).max(1)
}
