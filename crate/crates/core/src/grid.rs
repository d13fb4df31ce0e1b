//! Uniform time grids and paths sampled on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform partition `t_i = i T / n` of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::invalid(format!(
                "time horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::invalid("number of steps must be at least 1"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_i`; `t_0 = 0` and `t_n = T` exactly.
    #[inline]
    pub fn t(&self, i: usize) -> f64 {
        (i as f64 / self.steps as f64) * self.horizon
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.t(i)).collect()
    }
}

/// Real values sampled at every node of a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl SampledPath {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "expected {} samples, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "sampled path",
                index,
            });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.nodes().into_iter().map(f).collect())
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Values in reverse time order, i.e. `f(T - t)` on the same grid.
    pub fn reversed(&self) -> Self {
        let mut values = self.values.clone();
        values.reverse();
        Self {
            grid: self.grid,
            values,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}
