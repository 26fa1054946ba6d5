//! Discrete survival distributions on a [`TimeGrid`].

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::grid::TimeGrid;

/// Probability mass per grid point. Point `k` carries the mass of the bin
/// `(t_{k-1}, t_k]`; the final point also absorbs everything beyond the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    grid: TimeGrid,
    pmf: Vec<f64>,
}

impl SurvivalCurve {
    /// Validates non-negativity and unit total (within 1e-6); tiny negative
    /// round-off is clamped to zero.
    pub fn new(grid: TimeGrid, mut pmf: Vec<f64>) -> Result<Self> {
        if pmf.len() != grid.len() {
            return domain(format!("pmf has {} bins, grid has {}", pmf.len(), grid.len()));
        }
        for p in pmf.iter_mut() {
            if !p.is_finite() || *p < -1e-12 {
                return domain(format!("invalid probability mass {p}"));
            }
            *p = p.max(0.0);
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return domain(format!("pmf sums to {total}, expected 1"));
        }
        Ok(Self { grid, pmf })
    }

    /// Build from survival values `S(t_k)` at each grid point. Mass at point
    /// `k` is `S(t_{k-1}) - S(t_k)` with `S(t_{-1}) = 1`; the last point absorbs
    /// the remaining `S(t_max)`.
    pub fn from_survival(grid: TimeGrid, survival: &[f64]) -> Result<Self> {
        if survival.len() != grid.len() {
            return domain(format!(
                "survival has {} points, grid has {}",
                survival.len(),
                grid.len()
            ));
        }
        let mut pmf = Vec::with_capacity(survival.len());
        let mut prev = 1.0;
        for &s in survival {
            let s = s.clamp(0.0, 1.0).min(prev);
            pmf.push(prev - s);
            prev = s;
        }
        *pmf.last_mut().expect("grid is never empty") += prev;
        Self::new(grid, pmf)
    }

    /// `S = exp(-H)` on the grid.
    pub fn from_cumulative_hazard(grid: TimeGrid, chf: &[f64]) -> Result<Self> {
        let s: Vec<f64> = chf.iter().map(|h| (-h).exp()).collect();
        Self::from_survival(grid, &s)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// Cumulative mass `F(t_k)` at each grid point.
    pub fn cdf_values(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.pmf
            .iter()
            .map(|p| {
                acc += p;
                acc.min(1.0)
            })
            .collect()
    }

    /// Right-continuous step CDF at any time: mass of grid points `<= t`.
    pub fn cdf(&self, t: f64) -> f64 {
        match self.grid.index_at_or_before(t) {
            None => 0.0,
            Some(k) if k + 1 == self.pmf.len() => 1.0,
            Some(k) => self.pmf[..=k].iter().sum::<f64>().min(1.0),
        }
    }

    pub fn survival(&self, t: f64) -> f64 {
        1.0 - self.cdf(t)
    }

    /// Probability mass of the bin holding `t`.
    pub fn mass_at(&self, t: f64) -> f64 {
        self.pmf[self.grid.bin_of(t)]
    }

    /// First grid time whose cumulative mass reaches `p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let mut acc = 0.0;
        for (k, m) in self.pmf.iter().enumerate() {
            acc += m;
            if acc >= p - 1e-12 {
                return self.grid.time(k);
            }
        }
        self.grid.time(self.pmf.len() - 1)
    }

    /// Smallest grid time with `F >= 0.5`.
    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }
}

/// Piecewise-constant hazard on a grid with its running integral.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardCurve {
    grid: TimeGrid,
    hazard: Vec<f64>,
    cumulative: Vec<f64>,
}

impl HazardCurve {
    /// Accumulate point increments of the cumulative hazard into grid bins.
    /// An increment at time `t` lands on the first grid point at or after `t`.
    pub fn from_increments(grid: TimeGrid, times: &[f64], increments: &[f64]) -> Result<Self> {
        if times.len() != increments.len() {
            return domain("times and increments differ in length");
        }
        let mut per_bin = vec![0.0; grid.len()];
        for (&t, &inc) in times.iter().zip(increments) {
            if !(inc >= 0.0) {
                return domain(format!("negative hazard increment {inc}"));
            }
            if t < grid.origin() || t > grid.origin() + grid.t_max() + 1e-9 {
                continue;
            }
            per_bin[grid.bin_of(t)] += inc;
        }
        let res = grid.resolution();
        let hazard: Vec<f64> = per_bin.iter().map(|v| v / res).collect();
        let mut acc = 0.0;
        let cumulative = per_bin
            .iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        Ok(Self { grid, hazard, cumulative })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hazard(&self) -> &[f64] {
        &self.hazard
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn to_survival_curve(&self) -> Result<SurvivalCurve> {
        SurvivalCurve::from_cumulative_hazard(self.grid.clone(), &self.cumulative)
    }
}
