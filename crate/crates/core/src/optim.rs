//! Box-bounded BFGS minimizer used by the maximum-likelihood fitters.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence when the projected gradient max-norm falls below this.
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 500, grad_tol: 1e-9 }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lower)
        .map(|((&xi, &gi), &lo)| if xi <= lo && gi > 0.0 { 0.0 } else { gi })
        .collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimize `f` subject to `x_i >= lower_i`. The objective writes its gradient
/// into the second argument and returns the value; non-finite values are
/// treated as infeasible by the line search.
pub fn minimize<F>(mut f: F, x0: &[f64], lower: &[f64], opts: &BfgsOptions) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(lower.len(), n);
    let clamp = |x: &mut [f64]| {
        for (xi, &lo) in x.iter_mut().zip(lower) {
            if *xi < lo {
                *xi = lo;
            }
        }
    };
    let mut x = x0.to_vec();
    clamp(&mut x);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return Err(Error::Fit {
            reason: "objective not finite at the starting point".into(),
            iterations: 0,
            best: x,
        });
    }
    let identity = |n: usize| -> Vec<f64> {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        h
    };
    let mut h = identity(n);
    let mut fresh = true;
    let mut g_new = vec![0.0; n];

    for iter in 0..opts.max_iter {
        let pg = projected_gradient(&x, &g, lower);
        if max_abs(&pg) < opts.grad_tol {
            return Ok(Minimum { x, value: fx, iterations: iter });
        }
        let active: Vec<bool> = x
            .iter()
            .zip(&g)
            .zip(lower)
            .map(|((&xi, &gi), &lo)| xi <= lo && gi > 0.0)
            .collect();
        let mut d = vec![0.0; n];
        for i in 0..n {
            if active[i] {
                continue;
            }
            d[i] = -(0..n)
                .filter(|&j| !active[j])
                .map(|j| h[i * n + j] * pg[j])
                .sum::<f64>();
        }
        let mut slope: f64 = d.iter().zip(&pg).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            h = identity(n);
            fresh = true;
            d = pg.iter().map(|v| -v).collect();
            slope = -pg.iter().map(|v| v * v).sum::<f64>();
        }

        // Backtracking Armijo search along the projected path.
        let mut alpha = if fresh { (1.0 / max_abs(&d)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..80 {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            clamp(&mut xn);
            let fnew = f(&xn, &mut g_new);
            let decrease: f64 = g.iter().zip(xn.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if fnew.is_finite() && fnew <= fx + 1e-4 * decrease.min(0.0) {
                accepted = Some((xn, fnew));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if !fresh {
                h = identity(n);
                fresh = true;
                continue;
            }
            // No further descent is possible in floating point.
            if max_abs(&pg) < opts.grad_tol.sqrt() {
                return Ok(Minimum { x, value: fx, iterations: iter });
            }
            return Err(Error::Fit {
                reason: format!("line search failed (projected gradient {:.3e})", max_abs(&pg)),
                iterations: iter,
                best: x,
            });
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        x = xn;
        let f_prev = fx;
        fx = fnew;
        g.copy_from_slice(&g_new);

        if ss == 0.0 || (f_prev - fx).abs() <= 1e-16 * fx.abs().max(1.0) && max_abs(&s) < 1e-14 {
            let pg = projected_gradient(&x, &g, lower);
            if max_abs(&pg) < opts.grad_tol.sqrt() {
                return Ok(Minimum { x, value: fx, iterations: iter + 1 });
            }
        }
        if sy > 1e-12 * (ss * yy).sqrt() {
            if fresh {
                let scale = sy / yy;
                h.iter_mut().for_each(|v| *v *= scale);
                fresh = false;
            }
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
    }
    let pg = projected_gradient(&x, &g, lower);
    Err(Error::Fit {
        reason: format!(
            "maximum iterations reached (projected gradient {:.3e})",
            max_abs(&pg)
        ),
        iterations: opts.max_iter,
        best: x,
    })
}

/// Central-difference gradient.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64, out: &mut [f64]) {
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        out[i] = (fp - fm) / (2.0 * step);
    }
}
