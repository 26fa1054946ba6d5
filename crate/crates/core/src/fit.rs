//! Maximum-likelihood fitting of the parametric zoo and the
//! Kolmogorov–Smirnov distance used to compare fits.

use serde::{Deserialize, Serialize};

use crate::dist::ParametricDist;
use crate::error::{domain, Result};
use crate::optim::{minimize, numeric_gradient, BfgsOptions};
use crate::special::{ln_beta, logistic, softplus};

/// Lower clamp on shape/scale parameters so degenerate samples stay fittable.
pub const PARAM_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistKind {
    LogNormal,
    LogLogistic,
    Weibull,
    GeneralizedF,
}

impl DistKind {
    pub const ALL: [DistKind; 4] = [
        DistKind::LogNormal,
        DistKind::LogLogistic,
        DistKind::Weibull,
        DistKind::GeneralizedF,
    ];
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FittedDist {
    pub dist: ParametricDist,
    pub loglik: f64,
    pub iterations: usize,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Fit `kind` to uncensored durations by quasi-Newton ascent on the log-likelihood.
pub fn fit_parametric_mle(durations: &[f64], kind: DistKind) -> Result<FittedDist> {
    if durations.len() < 20 {
        return domain(format!("need at least 20 samples, got {}", durations.len()));
    }
    if let Some(bad) = durations.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
        return domain(format!("durations must be positive, got {bad}"));
    }
    let logs: Vec<f64> = durations.iter().map(|x| x.ln()).collect();
    let n = logs.len() as f64;
    let (m, sd) = mean_sd(&logs);
    let floor = PARAM_FLOOR.ln();
    let free = f64::NEG_INFINITY;
    let opts = BfgsOptions { max_iter: 1000, grad_tol: 1e-10 };

    // Objectives are mean negative log-likelihoods over transformed parameters.
    let (x0, lower, build): (Vec<f64>, Vec<f64>, fn(&[f64]) -> ParametricDist) = match kind {
        DistKind::LogNormal => (
            vec![m, sd.max(PARAM_FLOOR).ln()],
            vec![free, floor],
            |p| ParametricDist::LogNormal { mu: p[0], sigma: p[1].exp() },
        ),
        DistKind::LogLogistic => {
            let mut sorted = logs.clone();
            sorted.sort_by(f64::total_cmp);
            let med = sorted[sorted.len() / 2];
            let beta = (std::f64::consts::PI / (3f64.sqrt() * sd.max(1e-12))).max(PARAM_FLOOR);
            (
                vec![med, beta.ln().min(30.0)],
                vec![free, floor],
                |p| ParametricDist::LogLogistic { alpha: p[0].exp(), beta: p[1].exp() },
            )
        }
        DistKind::Weibull => {
            let k = (1.2825 / sd.max(1e-12)).max(PARAM_FLOOR).min(1e12);
            (
                vec![m + 0.5772 / k, k.ln()],
                vec![free, floor],
                |p| ParametricDist::Weibull { lambda: p[0].exp(), k: p[1].exp() },
            )
        }
        DistKind::GeneralizedF => {
            // F(20, 20) has ln-variance close to 0.2
            let sigma = (sd / 0.2f64.sqrt()).max(PARAM_FLOOR);
            (
                vec![m, sigma.ln(), 20f64.ln(), 20f64.ln()],
                vec![free, floor, floor, floor],
                |p| ParametricDist::GeneralizedF {
                    mu: p[0],
                    sigma: p[1].exp(),
                    d1: p[2].exp(),
                    d2: p[3].exp(),
                },
            )
        }
    };

    let objective = |p: &[f64], g: &mut [f64]| -> f64 {
        match kind {
            DistKind::LogNormal => {
                let (mu, ls) = (p[0], p[1]);
                let s = ls.exp();
                let (mut v, mut gm, mut gs) = (0.0, 0.0, 0.0);
                for &l in &logs {
                    let z = (l - mu) / s;
                    v += 0.5 * z * z + ls + l;
                    gm -= z / s;
                    gs += 1.0 - z * z;
                }
                g[0] = gm / n;
                g[1] = gs / n;
                v / n + 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            DistKind::LogLogistic => {
                let (la, lb) = (p[0], p[1]);
                let b = lb.exp();
                let (mut v, mut ga, mut gb) = (0.0, 0.0, 0.0);
                for &l in &logs {
                    let z = b * (l - la);
                    let sz = logistic(z);
                    v -= lb - l + z - 2.0 * softplus(z);
                    ga -= -b + 2.0 * b * sz;
                    gb -= 1.0 + z - 2.0 * z * sz;
                }
                g[0] = ga / n;
                g[1] = gb / n;
                v / n
            }
            DistKind::Weibull => {
                let (ll, lk) = (p[0], p[1]);
                let k = lk.exp();
                let (mut v, mut gl, mut gk) = (0.0, 0.0, 0.0);
                for &l in &logs {
                    let z = k * (l - ll);
                    let e = z.exp();
                    v -= lk - l + z - e;
                    gl -= -k + k * e;
                    gk -= 1.0 + z - z * e;
                }
                g[0] = gl / n;
                g[1] = gk / n;
                v / n
            }
            DistKind::GeneralizedF => {
                let nll = |p: &[f64]| -> f64 {
                    let (mu, ls, d1, d2) = (p[0], p[1], p[2].exp(), p[3].exp());
                    let s = ls.exp();
                    let r = (d1 / d2).ln();
                    let lb = ln_beta(0.5 * d1, 0.5 * d2);
                    let mut v = 0.0;
                    for &l in &logs {
                        let u = (l - mu) / s;
                        v -= 0.5 * d1 * r + 0.5 * d1 * u - 0.5 * (d1 + d2) * softplus(u + r) - lb - ls - l;
                    }
                    v / n
                };
                numeric_gradient(nll, p, 1e-6, g);
                nll(p)
            }
        }
    };

    let result = minimize(objective, &x0, &lower, &opts)?;
    let dist = build(&result.x);
    dist.validate()?;
    Ok(FittedDist { dist, loglik: -result.value * n, iterations: result.iterations })
}

/// Sup-norm distance between the empirical CDF of `durations` and `dist`.
pub fn ks_statistic(durations: &[f64], dist: &ParametricDist) -> Result<f64> {
    if durations.is_empty() {
        return domain("KS statistic needs at least one sample");
    }
    dist.validate()?;
    let mut xs = durations.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = if x > 0.0 { dist.cdf_unchecked(x) } else { 0.0 };
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok(d)
}
