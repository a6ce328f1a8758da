use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid on [0, T] with K steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Grid point t_k = T * k / K; t_K equals T exactly.
    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        self.horizon * (k as f64 / self.steps as f64)
    }

    /// Left-endpoint Riemann integral of per-step values, computed as
    /// mean * T so that a constant integrand of 1 integrates to T exactly.
    #[inline]
    pub fn integrate(&self, step_values: &[f64]) -> f64 {
        debug_assert_eq!(step_values.len(), self.steps);
        let mut sum = 0.0;
        for v in step_values {
            sum += v;
        }
        (sum / self.steps as f64) * self.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_is_exact() {
        for k in [1usize, 3, 7, 49, 100, 1000] {
            let g = TimeGrid::new(1.0, k).unwrap();
            assert_eq!(g.t(k), 1.0);
            assert!(g.dt() > 0.0);
        }
        let g = TimeGrid::new(2.7, 49).unwrap();
        assert_eq!(g.t(49), 2.7);
    }

    #[test]
    fn constant_one_integrates_to_horizon_exactly() {
        for k in [3usize, 7, 49, 103] {
            let g = TimeGrid::new(1.0, k).unwrap();
            let ones = vec![1.0; k];
            assert_eq!(g.integrate(&ones), 1.0);
        }
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
    }
}
