//! Likelihood plus pairwise ranking loss on discrete output curves.

use serde::{Deserialize, Serialize};

use super::tape::Tensor;
use crate::grid::TimeGrid;

/// Probability floor inside the log terms.
pub const MASS_FLOOR: f64 = 1e-12;

/// Observed duration relative to the prediction time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub time: f64,
    pub event: bool,
}

#[derive(Clone, Debug)]
pub struct LossValue {
    pub likelihood: f64,
    pub ranking: f64,
    /// Terms whose probability hit the floor.
    pub clamped: usize,
    /// Gradient with respect to each row's pmf.
    pub grad: Tensor,
}

impl LossValue {
    pub fn total(&self) -> f64 {
        self.likelihood + self.ranking
    }
}

/// Negative log-likelihood of `(time, event)` pairs plus the exponential
/// ordering penalty over all pairs with `time_i < time_j`.
pub fn composite_loss(pmf: &Tensor, grid: &TimeGrid, targets: &[Target], eta_sigma: f64) -> LossValue {
    let (n, k) = (pmf.rows, pmf.cols);
    assert_eq!(n, targets.len(), "one target per row");
    let rel = grid.rebased(0.0);
    let bins: Vec<usize> = targets.iter().map(|t| rel.bin_of(t.time)).collect();
    let cdf: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let mut acc = 0.0;
            pmf.row(r)
                .iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect();

    // Gradient with respect to F(b) (mass at points <= b) and S(b) (mass
    // at points > b), folded into pmf gradients at the end.
    let mut g_cdf = vec![0.0; n * k];
    let mut g_tail = vec![0.0; n * k];
    let mut grad = Tensor::zeros(n, k);
    let mut likelihood = 0.0;
    let mut clamped = 0;
    for (r, t) in targets.iter().enumerate() {
        let b = bins[r];
        if t.event {
            let f = pmf.row(r)[b];
            if f < MASS_FLOOR {
                clamped += 1;
                likelihood -= MASS_FLOOR.ln();
            } else {
                likelihood -= f.ln();
                grad.data[r * k + b] -= 1.0 / f;
            }
        } else {
            let s: f64 = pmf.row(r)[b + 1..].iter().sum();
            if s < MASS_FLOOR {
                clamped += 1;
                likelihood -= MASS_FLOOR.ln();
            } else {
                likelihood -= s.ln();
                g_tail[r * k + b] -= 1.0 / s;
            }
        }
    }

    let mut ranking = 0.0;
    for i in 0..n {
        let bi = bins[i];
        let fi = cdf[i][bi];
        for j in 0..n {
            if targets[i].time < targets[j].time {
                let e = (-(fi - cdf[j][bi]) / eta_sigma).exp();
                ranking += e;
                g_cdf[i * k + bi] -= e / eta_sigma;
                g_cdf[j * k + bi] += e / eta_sigma;
            }
        }
    }

    for r in 0..n {
        let row = &mut grad.data[r * k..(r + 1) * k];
        let mut acc = 0.0;
        for c in (0..k).rev() {
            acc += g_cdf[r * k + c];
            row[c] += acc;
        }
        let mut acc = 0.0;
        for c in 0..k {
            row[c] += acc;
            acc += g_tail[r * k + c];
        }
    }
    LossValue { likelihood, ranking, clamped, grad }
}
