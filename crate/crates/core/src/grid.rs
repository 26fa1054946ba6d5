use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

const EPS: f64 = 1e-9;

/// Regular grid of minutes `origin + k * resolution`, `k = 0..=t_max / resolution`.
///
/// `t_max` is the span covered past the origin, so the last point sits at
/// `origin + t_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    origin: f64,
    resolution: f64,
    t_max: f64,
}

impl TimeGrid {
    pub fn new(origin: f64, resolution: f64, t_max: f64) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return domain(format!("grid resolution must be positive, got {resolution}"));
        }
        if !(t_max >= 0.0) || !t_max.is_finite() || !origin.is_finite() {
            return domain(format!("invalid grid span origin={origin} t_max={t_max}"));
        }
        let steps = t_max / resolution;
        if (steps - steps.round()).abs() > 1e-6 {
            return domain(format!("resolution {resolution} does not divide t_max {t_max}"));
        }
        Ok(Self { origin, resolution, t_max })
    }

    /// Grid whose span is the longest observed duration plus a 20% margin,
    /// rounded up to a whole bin.
    pub fn for_max_duration(max_duration: f64, resolution: f64) -> Result<Self> {
        if !(max_duration > 0.0) {
            return domain("maximum duration must be positive");
        }
        let bins = (1.2 * max_duration / resolution - 1e-9).ceil().max(1.0);
        Self::new(0.0, resolution, bins * resolution)
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        (self.t_max / self.resolution).round() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> f64 {
        self.origin + k as f64 * self.resolution
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    /// Same spacing and span, moved to a new origin.
    pub fn rebased(&self, origin: f64) -> Self {
        Self { origin, ..self.clone() }
    }

    /// Index of the last grid point at or before `t`, if any.
    pub fn index_at_or_before(&self, t: f64) -> Option<usize> {
        let rel = (t - self.origin) / self.resolution;
        if rel < -EPS {
            return None;
        }
        Some(((rel + EPS).floor() as usize).min(self.len() - 1))
    }

    /// Index of the bin holding time `t`: bins are `(t_{k-1}, t_k]`, so this is
    /// the first grid point at or after `t`, clamped to the grid.
    pub fn bin_of(&self, t: f64) -> usize {
        let rel = (t - self.origin) / self.resolution;
        if rel <= 0.0 {
            return 0;
        }
        ((rel - EPS).ceil() as usize).min(self.len() - 1)
    }
}
