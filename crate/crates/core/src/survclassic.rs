//! Cox proportional hazards (Efron ties, Breslow baseline) and
//! accelerated failure time models, with AICc model selection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curve::{HazardCurve, SurvivalCurve};
use crate::dist::ParametricDist;
use crate::error::{domain, Error, Result};
use crate::grid::TimeGrid;
use crate::optim::{minimize, BfgsOptions};
use crate::special::{ln_norm_sf, norm_hazard};

/// Right-censored survival data with a dense design matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurvData {
    pub x: Vec<Vec<f64>>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
}

impl SurvData {
    pub fn new(x: Vec<Vec<f64>>, time: Vec<f64>, event: Vec<bool>) -> Result<Self> {
        if x.len() != time.len() || time.len() != event.len() {
            return domain("design, times and events differ in length");
        }
        let p = x.first().map_or(0, Vec::len);
        if x.iter().any(|r| r.len() != p) {
            return domain("ragged design matrix");
        }
        if time.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return domain("times must be finite and non-negative");
        }
        Ok(Self { x, time, event })
    }

    pub fn n(&self) -> usize {
        self.time.len()
    }

    pub fn p(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|&&e| e).count()
    }

    /// Keep only the listed columns.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self {
            x: self.x.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect(),
            time: self.time.clone(),
            event: self.event.clone(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Groups of subjects sharing a time, in decreasing time order.
fn time_groups(time: &[f64]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]).then(a.cmp(&b)));
    let mut groups = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && time[order[j]] == time[order[i]] {
            j += 1;
        }
        groups.push((i, j));
        i = j;
    }
    (order, groups)
}

/// Efron log partial likelihood with gradient and negative Hessian.
pub struct PartialLikelihood {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Negative Hessian (observed information).
    pub information: DMatrix<f64>,
}

pub fn efron_loglik(data: &SurvData, beta: &[f64]) -> PartialLikelihood {
    let p = beta.len();
    let (order, groups) = time_groups(&data.time);
    let eta: Vec<f64> = data.x.iter().map(|r| dot(r, beta)).collect();
    // Shift for numerical stability; the likelihood is invariant to it.
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let w: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();

    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = DMatrix::<f64>::zeros(p, p);
    let mut value = 0.0;
    let mut grad = vec![0.0; p];
    let mut info = DMatrix::<f64>::zeros(p, p);

    for &(a, b) in &groups {
        let members = &order[a..b];
        for &i in members {
            s0 += w[i];
            for j in 0..p {
                s1[j] += w[i] * data.x[i][j];
                for k in 0..=j {
                    s2[(j, k)] += w[i] * data.x[i][j] * data.x[i][k];
                }
            }
        }
        let events: Vec<usize> = members.iter().copied().filter(|&i| data.event[i]).collect();
        let d = events.len();
        if d == 0 {
            continue;
        }
        let mut t0 = 0.0;
        let mut t1 = vec![0.0; p];
        let mut t2 = DMatrix::<f64>::zeros(p, p);
        for &i in &events {
            value += eta[i] - shift;
            t0 += w[i];
            for j in 0..p {
                grad[j] += data.x[i][j];
                t1[j] += w[i] * data.x[i][j];
                for k in 0..=j {
                    t2[(j, k)] += w[i] * data.x[i][j] * data.x[i][k];
                }
            }
        }
        for l in 0..d {
            let c = l as f64 / d as f64;
            let den = s0 - c * t0;
            value -= den.ln();
            let m1: Vec<f64> = (0..p).map(|j| (s1[j] - c * t1[j]) / den).collect();
            for j in 0..p {
                grad[j] -= m1[j];
                for k in 0..=j {
                    let v = (s2[(j, k)] - c * t2[(j, k)]) / den - m1[j] * m1[k];
                    info[(j, k)] += v;
                }
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            info[(k, j)] = info[(j, k)];
        }
    }
    PartialLikelihood { value, gradient: grad, information: info }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Diagonal jitter relative to the mean information.
    pub ridge: f64,
    /// Divergence bound on standardized coefficients.
    pub separation_bound: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self { max_iter: 100, grad_tol: 1e-8, ridge: 1e-8, separation_bound: 20.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub beta: Vec<f64>,
    /// Distinct event times and Breslow hazard increments.
    pub knot_times: Vec<f64>,
    pub knot_increments: Vec<f64>,
    pub loglik: f64,
    /// Number of free (non-constant) coefficients.
    pub n_free: usize,
    pub iterations: usize,
}

/// Newton–Raphson with step halving on the Efron partial likelihood.
///
/// Columns are centred and scaled internally; constant columns keep a zero
/// coefficient.
pub fn cox_fit(data: &SurvData, opts: &CoxOptions) -> Result<CoxModel> {
    if data.n_events() < 2 {
        return domain(format!("need at least 2 events, got {}", data.n_events()));
    }
    let n = data.n();
    let p = data.p();
    let mut means = vec![0.0; p];
    let mut sds = vec![0.0; p];
    for j in 0..p {
        let m = data.x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let v = data.x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
        means[j] = m;
        sds[j] = v.sqrt();
    }
    let free: Vec<usize> = (0..p).filter(|&j| sds[j] > 1e-12).collect();
    let std_data = SurvData {
        x: data
            .x
            .iter()
            .map(|r| free.iter().map(|&j| (r[j] - means[j]) / sds[j]).collect())
            .collect(),
        time: data.time.clone(),
        event: data.event.clone(),
    };
    let q = free.len();
    let mut beta = vec![0.0; q];
    let mut cur = efron_loglik(&std_data, &beta);
    let mut iterations = 0;
    while q > 0 {
        let gmax = cur.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut h = cur.information.clone();
        let jitter = opts.ridge * (h.trace() / q as f64).max(f64::MIN_POSITIVE);
        for j in 0..q {
            h[(j, j)] += jitter;
        }
        let g = DVector::from_vec(cur.gradient.clone());
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => h.lu().solve(&g).unwrap_or_else(|| g.clone()),
        };
        // A flat but unbounded likelihood has a vanishing gradient while the
        // Newton step stays large, so both must be small. Near-collinear
        // columns also give large steps; those stop once the expected gain is
        // negligible and divergence is checked after the loop.
        if gmax < opts.grad_tol && (step.amax() < 1e-6 || g.dot(&step) < 1e-10 * cur.value.abs().max(1.0)) {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::Fit {
                reason: format!("Cox Newton iterations exhausted, gradient {gmax:.3e}"),
                iterations,
                best: beta,
            });
        }
        iterations += 1;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let next = efron_loglik(&std_data, &trial);
            if next.value.is_finite() && next.value >= cur.value - 1e-12 * cur.value.abs().max(1.0) {
                beta = trial;
                cur = next;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if let Some((j, b)) = beta.iter().enumerate().find(|(_, b)| b.abs() > opts.separation_bound) {
            return Err(Error::Separation { index: free[j], value: b.abs() });
        }
        if !accepted {
            let gmax = cur.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if gmax < opts.grad_tol.sqrt() {
                break;
            }
            return Err(Error::Fit {
                reason: "step halving could not improve the partial likelihood".into(),
                iterations,
                best: beta,
            });
        }
    }
    // Converged only because the likelihood went flat at a divergent point.
    let events = data.n_events() as f64;
    for j in 0..q {
        if cur.information[(j, j)] < 1e-8 * events && beta[j].abs() > 5.0 {
            return Err(Error::Separation { index: free[j], value: beta[j].abs() });
        }
    }
    let mut full = vec![0.0; p];
    for (k, &j) in free.iter().enumerate() {
        full[j] = beta[k] / sds[j];
    }
    let (knot_times, knot_increments) = breslow(data, &full);
    Ok(CoxModel { beta: full, knot_times, knot_increments, loglik: cur.value, n_free: q, iterations })
}

/// [`cox_fit`] that drops any column whose coefficient diverges and refits
/// on the rest. Dropped columns keep a zero coefficient and are returned.
pub fn cox_fit_dropping(data: &SurvData, opts: &CoxOptions) -> Result<(CoxModel, Vec<usize>)> {
    let mut keep: Vec<usize> = (0..data.p()).collect();
    let mut dropped = Vec::new();
    loop {
        match cox_fit(&data.select_columns(&keep), opts) {
            Ok(m) => {
                let mut beta = vec![0.0; data.p()];
                for (k, &j) in keep.iter().enumerate() {
                    beta[j] = m.beta[k];
                }
                dropped.sort_unstable();
                return Ok((CoxModel { beta, ..m }, dropped));
            }
            Err(Error::Separation { index, .. }) if keep.len() > 1 => dropped.push(keep.remove(index)),
            Err(e) => return Err(e),
        }
    }
}

/// Breslow increments `d_i / sum_{risk set} exp(x'b)` at each distinct event time.
pub fn breslow(data: &SurvData, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (order, groups) = time_groups(&data.time);
    let eta: Vec<f64> = data.x.iter().map(|r| dot(r, beta)).collect();
    let mut risk = 0.0;
    let mut times = Vec::new();
    let mut incs = Vec::new();
    for &(a, b) in &groups {
        let members = &order[a..b];
        for &i in members {
            risk += eta[i].exp();
        }
        let d = members.iter().filter(|&&i| data.event[i]).count();
        if d > 0 {
            times.push(data.time[members[0]]);
            incs.push(d as f64 / risk);
        }
    }
    times.reverse();
    incs.reverse();
    (times, incs)
}

impl CoxModel {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        dot(x, &self.beta)
    }

    /// Baseline cumulative hazard at `t`.
    pub fn baseline_cumhaz(&self, t: f64) -> f64 {
        let k = self.knot_times.partition_point(|&s| s <= t);
        self.knot_increments[..k].iter().sum()
    }

    /// Baseline hazard accumulated onto a grid (times relative to its origin).
    pub fn baseline(&self, grid: &TimeGrid) -> Result<HazardCurve> {
        let rel = grid.rebased(0.0);
        HazardCurve::from_increments(rel, &self.knot_times, &self.knot_increments)
    }

    /// `S(t) = exp(-H0(t) exp(x'b))` at grid times relative to the origin.
    pub fn predict(&self, x: &[f64], grid: &TimeGrid) -> Result<SurvivalCurve> {
        let risk = self.linear_predictor(x).exp();
        let mut s = Vec::with_capacity(grid.len());
        let mut k = 0;
        let mut acc = 0.0;
        for g in 0..grid.len() {
            let t = g as f64 * grid.resolution();
            while k < self.knot_times.len() && self.knot_times[k] <= t + 1e-9 {
                acc += self.knot_increments[k];
                k += 1;
            }
            s.push((-acc * risk).exp());
        }
        SurvivalCurve::from_survival(grid.clone(), &s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AftKind {
    LogNormal,
    Weibull,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AftModel {
    pub kind: AftKind,
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub scale: f64,
    pub loglik: f64,
    /// Standard errors of (intercept, beta.., scale).
    pub std_errors: Vec<f64>,
}

/// Per-observation log-likelihood and its derivatives in (location, log scale).
fn aft_terms(kind: AftKind, y: f64, mu: f64, log_sigma: f64, event: bool) -> (f64, f64, f64) {
    let sigma = log_sigma.exp();
    let z = (y - mu) / sigma;
    match (kind, event) {
        (AftKind::LogNormal, true) => {
            let l = -y - log_sigma - 0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
            (l, z / sigma, z * z - 1.0)
        }
        (AftKind::LogNormal, false) => {
            let h = norm_hazard(z);
            (ln_norm_sf(z), h / sigma, h * z)
        }
        (AftKind::Weibull, true) => {
            let ez = z.exp();
            let l = -y - log_sigma + z - ez;
            (l, -(1.0 - ez) / sigma, -1.0 - z * (1.0 - ez))
        }
        (AftKind::Weibull, false) => {
            let ez = z.exp();
            (-ez, ez / sigma, z * ez)
        }
    }
}

/// Total log-likelihood and gradient over `(intercept, beta.., log scale)`.
fn aft_loglik(kind: AftKind, data: &SurvData, logs: &[f64], theta: &[f64], grad: &mut [f64]) -> f64 {
    let p = data.p();
    grad.iter_mut().for_each(|g| *g = 0.0);
    let log_sigma = theta[p + 1];
    let mut total = 0.0;
    for i in 0..data.n() {
        let mu = theta[0] + dot(&data.x[i], &theta[1..=p]);
        let (l, dmu, dls) = aft_terms(kind, logs[i], mu, log_sigma, data.event[i]);
        total += l;
        grad[0] += dmu;
        for j in 0..p {
            grad[1 + j] += dmu * data.x[i][j];
        }
        grad[p + 1] += dls;
    }
    total
}

/// Ordinary least squares of `y` on `[1, x]`.
pub fn ols(x: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    let p = x.first().map_or(0, Vec::len);
    let a = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let b = DVector::from_column_slice(y);
    let ata = a.transpose() * &a;
    let atb = a.transpose() * b;
    let sol = match ata.clone().cholesky() {
        Some(c) => c.solve(&atb),
        None => {
            let mut r = ata;
            for j in 0..=p {
                r[(j, j)] += 1e-10;
            }
            r.lu().solve(&atb).ok_or_else(|| Error::Domain("singular least-squares design".into()))?
        }
    };
    Ok(sol.iter().copied().collect())
}

/// Maximum likelihood AFT fit, started from least squares on log times.
pub fn aft_fit(data: &SurvData, kind: AftKind) -> Result<AftModel> {
    let n = data.n();
    let p = data.p();
    if n < p + 2 {
        return domain(format!("need at least {} samples for {p} covariates, got {n}", p + 2));
    }
    if data.time.iter().any(|&t| !(t > 0.0)) {
        return domain("AFT needs positive times");
    }
    let logs: Vec<f64> = data.time.iter().map(|t| t.ln()).collect();
    let start = ols(&data.x, &logs)?;
    let rss: f64 = (0..n)
        .map(|i| (logs[i] - start[0] - dot(&data.x[i], &start[1..])).powi(2))
        .sum();
    let sigma0 = (rss / n as f64).sqrt().max(1e-3);
    let mut theta0 = start;
    theta0.push(match kind {
        AftKind::LogNormal => sigma0.ln(),
        // Gumbel sd is pi/sqrt(6) times the scale.
        AftKind::Weibull => (sigma0 * 6f64.sqrt() / std::f64::consts::PI).ln(),
    });
    if kind == AftKind::Weibull {
        // Gumbel mean is -0.5772 times the scale.
        theta0[0] += 0.577_215_664_9 * theta0[p + 1].exp();
    }
    let lower = vec![f64::NEG_INFINITY; p + 2];
    let nf = n as f64;
    let objective = |th: &[f64], g: &mut [f64]| {
        let v = aft_loglik(kind, data, &logs, th, g);
        for gi in g.iter_mut() {
            *gi = -*gi / nf;
        }
        -v / nf
    };
    let opts = BfgsOptions { max_iter: 2000, grad_tol: 1e-11 };
    let min = minimize(objective, &theta0, &lower, &opts)?;
    let theta = min.x;
    let loglik = -min.value * nf;
    let std_errors = aft_std_errors(kind, data, &logs, &theta);
    Ok(AftModel {
        kind,
        intercept: theta[0],
        beta: theta[1..=p].to_vec(),
        scale: theta[p + 1].exp(),
        loglik,
        std_errors,
    })
}

/// Inverse observed information from central differences of the analytic
/// gradient; the scale entry uses the delta method.
fn aft_std_errors(kind: AftKind, data: &SurvData, logs: &[f64], theta: &[f64]) -> Vec<f64> {
    let m = theta.len();
    let mut hess = DMatrix::<f64>::zeros(m, m);
    let mut gp = vec![0.0; m];
    let mut gm = vec![0.0; m];
    for j in 0..m {
        let h = 1e-5 * theta[j].abs().max(1.0);
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[j] += h;
        tm[j] -= h;
        aft_loglik(kind, data, logs, &tp, &mut gp);
        aft_loglik(kind, data, logs, &tm, &mut gm);
        for k in 0..m {
            hess[(k, j)] = -(gp[k] - gm[k]) / (2.0 * h);
        }
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    match sym.try_inverse() {
        Some(cov) => {
            let mut se: Vec<f64> = (0..m).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
            se[m - 1] *= theta[m - 1].exp();
            se
        }
        None => vec![f64::NAN; m],
    }
}

impl AftModel {
    pub fn location(&self, x: &[f64]) -> f64 {
        self.intercept + dot(x, &self.beta)
    }

    pub fn distribution(&self, x: &[f64]) -> ParametricDist {
        let mu = self.location(x);
        match self.kind {
            AftKind::LogNormal => ParametricDist::LogNormal { mu, sigma: self.scale },
            AftKind::Weibull => ParametricDist::Weibull { lambda: mu.exp(), k: 1.0 / self.scale },
        }
    }

    /// Discretized distribution at grid times relative to the origin.
    pub fn predict(&self, x: &[f64], grid: &TimeGrid) -> Result<SurvivalCurve> {
        let d = self.distribution(x);
        let s: Vec<f64> = (0..grid.len())
            .map(|k| {
                let t = k as f64 * grid.resolution();
                if t <= 0.0 {
                    1.0
                } else {
                    1.0 - d.cdf_unchecked(t)
                }
            })
            .collect();
        SurvivalCurve::from_survival(grid.clone(), &s)
    }

    pub fn n_params(&self) -> usize {
        self.beta.len() + 2
    }
}

/// One candidate in an information-criterion comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AicRow {
    pub name: String,
    pub loglik: f64,
    pub k: usize,
    pub n: usize,
    pub aicc: f64,
}

/// Sample-size corrected AIC.
pub fn aicc(loglik: f64, k: usize, n: usize) -> Result<f64> {
    if n <= k + 1 {
        return domain(format!("AICc undefined for n={n} with k={k} parameters"));
    }
    let (kf, nf) = (k as f64, n as f64);
    Ok(-2.0 * loglik + 2.0 * kf + 2.0 * kf * (kf + 1.0) / (nf - kf - 1.0))
}

/// Index of the lowest-AICc candidate plus the full table.
/// Candidates are `(name, loglik, k)` fitted on the same `n` samples.
pub fn aic_select(candidates: &[(String, f64, usize)], n: usize) -> Result<(usize, Vec<AicRow>)> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidate models".into()));
    }
    let rows = candidates
        .iter()
        .map(|(name, ll, k)| {
            Ok(AicRow { name: name.clone(), loglik: *ll, k: *k, n, aicc: aicc(*ll, *k, n)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.aicc.total_cmp(&b.1.aicc).then(a.1.k.cmp(&b.1.k)))
        .map(|(i, _)| i)
        .expect("non-empty");
    Ok((best, rows))
}

/// Backward elimination over column groups by AICc.
///
/// `fit` returns `(loglik, k)` for a column subset. Returns the kept group
/// indices and every evaluated candidate.
pub fn backward_eliminate<F>(
    groups: &[(String, Vec<usize>)],
    n: usize,
    mut fit: F,
) -> Result<(Vec<usize>, Vec<AicRow>)>
where
    F: FnMut(&[usize]) -> Result<(f64, usize)>,
{
    let cols = |keep: &[usize]| -> Vec<usize> {
        let mut c: Vec<usize> = keep.iter().flat_map(|&g| groups[g].1.iter().copied()).collect();
        c.sort_unstable();
        c
    };
    let mut keep: Vec<usize> = (0..groups.len()).collect();
    let (ll, k) = fit(&cols(&keep))?;
    let mut best = aicc(ll, k, n)?;
    let mut table = vec![AicRow { name: "full".into(), loglik: ll, k, n, aicc: best }];
    loop {
        let mut improved: Option<(usize, f64)> = None;
        for (pos, &g) in keep.iter().enumerate() {
            let trial: Vec<usize> = keep.iter().copied().filter(|&h| h != g).collect();
            let Ok((ll, k)) = fit(&cols(&trial)) else { continue };
            let score = aicc(ll, k, n)?;
            table.push(AicRow { name: format!("drop {}", groups[g].0), loglik: ll, k, n, aicc: score });
            if score < improved.map_or(best, |(_, s)| s) {
                improved = Some((pos, score));
            }
        }
        match improved {
            Some((pos, score)) => {
                keep.remove(pos);
                best = score;
            }
            None => break,
        }
    }
    Ok((keep, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    /// Plain partial likelihood without tie handling.
    fn plain_loglik(data: &SurvData, beta: &[f64]) -> f64 {
        let eta: Vec<f64> = data.x.iter().map(|r| dot(r, beta)).collect();
        let mut l = 0.0;
        for i in 0..data.n() {
            if data.event[i] {
                let risk: f64 = (0..data.n()).filter(|&j| data.time[j] >= data.time[i]).map(|j| eta[j].exp()).sum();
                l += eta[i] - risk.ln();
            }
        }
        l
    }

    fn ph_data(n: usize, beta: &[f64], seed: u64) -> SurvData {
        // Exponential baseline hazard 0.02/min, inverse-transform sampling.
        let mut rng = keyed(seed, 0, 0);
        let mut x = Vec::new();
        let mut time = Vec::new();
        let mut event = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = beta.iter().map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let u: f64 = rng.random();
            let t = -u.ln() / (0.02 * dot(&row, beta).exp());
            let c: f64 = rng.random_range(0.0..300.0);
            x.push(row);
            time.push(t.min(c));
            event.push(t <= c);
        }
        SurvData::new(x, time, event).unwrap()
    }

    #[test]
    fn zero_covariates_give_zero_beta() {
        let d = SurvData::new(vec![vec![0.0]; 5], vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![true; 5]).unwrap();
        let m = cox_fit(&d, &CoxOptions::default()).unwrap();
        assert_eq!(m.beta, vec![0.0]);
        assert_eq!(m.n_free, 0);
    }

    #[test]
    fn separated_pair_raises() {
        let d = SurvData::new(vec![vec![1.0], vec![0.0]], vec![1.0, 2.0], vec![true, true]).unwrap();
        let pl = efron_loglik(&d, &[0.7]);
        assert!((pl.value - (0.7 - (0.7f64.exp() + 1.0).ln())).abs() < 1e-12);
        let r = cox_fit(&d, &CoxOptions::default());
        assert!(matches!(r, Err(Error::Separation { index: 0, .. })), "{r:?}");
    }

    #[test]
    fn recovers_ph_coefficients() {
        let d = ph_data(2000, &[0.5, -0.3], 1);
        let m = cox_fit(&d, &CoxOptions::default()).unwrap();
        assert!((m.beta[0] - 0.5).abs() < 0.1, "{:?}", m.beta);
        assert!((m.beta[1] + 0.3).abs() < 0.1, "{:?}", m.beta);
    }

    #[test]
    fn efron_equals_plain_without_ties() {
        let d = ph_data(60, &[0.4, 0.1], 2);
        for b in [[0.0, 0.0], [0.3, -0.2], [1.0, 0.5]] {
            assert!((efron_loglik(&d, &b).value - plain_loglik(&d, &b)).abs() < 1e-10);
        }
    }

    #[test]
    fn efron_gradient_matches_differences() {
        let mut d = ph_data(80, &[0.4, -0.2, 0.1], 3);
        for t in d.time.iter_mut() {
            *t = t.round();
        }
        let mut rng = keyed(9, 0, 0);
        for _ in 0..10 {
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pl = efron_loglik(&d, &b);
            for j in 0..3 {
                let h = 1e-6;
                let mut bp = b.clone();
                let mut bm = b.clone();
                bp[j] += h;
                bm[j] -= h;
                let fd = (efron_loglik(&d, &bp).value - efron_loglik(&d, &bm).value) / (2.0 * h);
                let rel = (fd - pl.gradient[j]).abs() / pl.gradient[j].abs().max(1.0);
                assert!(rel < 1e-6, "rel {rel}");
            }
        }
    }

    #[test]
    fn breslow_examples() {
        let d = SurvData::new(vec![vec![0.0]; 4], vec![1.0, 2.0, 3.0, 4.0], vec![true; 4]).unwrap();
        let (t, inc) = breslow(&d, &[0.0]);
        assert_eq!(t, vec![1.0, 2.0, 3.0, 4.0]);
        for (i, v) in inc.iter().enumerate() {
            assert!((v - 1.0 / (4 - i) as f64).abs() < 1e-15);
        }
        let one = SurvData::new(vec![vec![0.0]], vec![3.0], vec![true]).unwrap();
        assert_eq!(breslow(&one, &[0.0]).1, vec![1.0]);
        let tied = SurvData::new(vec![vec![0.0]; 4], vec![2.0, 2.0, 5.0, 6.0], vec![true, true, false, true]).unwrap();
        let (t, inc) = breslow(&tied, &[0.0]);
        assert_eq!(t[0], 2.0);
        assert!((inc[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn proportional_hazards_identity() {
        let d = ph_data(300, &[0.5, -0.3], 4);
        let m = cox_fit(&d, &CoxOptions::default()).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 200.0).unwrap();
        let base = m.predict(&[0.0, 0.0], &g).unwrap();
        let x = [std::f64::consts::LN_2 / m.beta[0], 0.0];
        let c = m.predict(&x, &g).unwrap();
        for t in 0..200 {
            let t = t as f64;
            assert!((c.survival(t) - base.survival(t).powi(2)).abs() < 1e-10);
            assert!((base.survival(t) - (-m.baseline_cumhaz(t)).exp()).abs() < 1e-10);
        }
        assert_eq!(c.cdf(0.0), 0.0);
    }

    #[test]
    fn aft_lognormal_matches_least_squares() {
        let mut rng = keyed(5, 0, 0);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut x = Vec::new();
        let mut t = Vec::new();
        for _ in 0..500 {
            let row = vec![rng.random_range(0.0..1.0), f64::from(rng.random::<bool>())];
            t.push((3.0 + 0.4 * row[0] - 0.2 * row[1] + noise.sample(&mut rng)).exp());
            x.push(row);
        }
        let d = SurvData::new(x.clone(), t.clone(), vec![true; 500]).unwrap();
        let m = aft_fit(&d, AftKind::LogNormal).unwrap();
        let logs: Vec<f64> = t.iter().map(|v| v.ln()).collect();
        let b = ols(&x, &logs).unwrap();
        assert!((m.intercept - b[0]).abs() < 1e-8);
        assert!((m.beta[0] - b[1]).abs() < 1e-8);
        assert!((m.beta[1] - b[2]).abs() < 1e-8);
    }

    #[test]
    fn aft_intercept_only_is_gaussian_mle() {
        let mut rng = keyed(6, 0, 0);
        let t: Vec<f64> = (0..200).map(|_| rng.random_range(5.0..200.0)).collect();
        let d = SurvData::new(vec![vec![]; 200], t.clone(), vec![true; 200]).unwrap();
        let m = aft_fit(&d, AftKind::LogNormal).unwrap();
        let logs: Vec<f64> = t.iter().map(|v| v.ln()).collect();
        let mean = logs.iter().sum::<f64>() / 200.0;
        let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / 200.0).sqrt();
        assert!((m.intercept - mean).abs() < 1e-8);
        assert!((m.scale - sd).abs() < 1e-7);
    }

    #[test]
    fn aft_weibull_recovers_table_parameters() {
        let mut rng = keyed(7, 0, 0);
        let t: Vec<f64> = (0..5000)
            .map(|_| {
                let u: f64 = rng.random();
                60.0 * (-u.ln()).powf(1.0 / 1.5)
            })
            .collect();
        let d = SurvData::new(vec![vec![]; 5000], t, vec![true; 5000]).unwrap();
        let m = aft_fit(&d, AftKind::Weibull).unwrap();
        let se_lambda = m.intercept.exp() * m.std_errors[0];
        let k = 1.0 / m.scale;
        let se_k = m.std_errors[1] / (m.scale * m.scale);
        assert!((m.intercept.exp() - 60.0).abs() < 3.0 * se_lambda, "{m:?}");
        assert!((k - 1.5).abs() < 3.0 * se_k, "k {k} se {se_k}");
    }

    #[test]
    fn aft_prediction_scales_median() {
        let m = AftModel {
            kind: AftKind::LogNormal,
            intercept: 3.0,
            beta: vec![1.0],
            scale: 0.4,
            loglik: 0.0,
            std_errors: vec![],
        };
        let g = TimeGrid::new(0.0, 0.01, 200.0).unwrap();
        let m0 = m.predict(&[0.0], &g).unwrap().median();
        let m1 = m.predict(&[std::f64::consts::LN_2], &g).unwrap().median();
        assert!((m0 - 3f64.exp()).abs() < 0.011);
        assert!((m1 - 2.0 * 3f64.exp()).abs() < 0.011);
        let total: f64 = m.predict(&[0.3], &g).unwrap().pmf().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn aicc_prefers_fewer_parameters_on_ties() {
        let (best, rows) = aic_select(&[("a".into(), -100.0, 3), ("b".into(), -100.0, 5)], 50).unwrap();
        assert_eq!(best, 0);
        assert_eq!(rows.len(), 2);
        let (best, _) = aic_select(&[("only".into(), -1.0, 1)], 10).unwrap();
        assert_eq!(best, 0);
        assert!(aic_select(&[("x".into(), -1.0, 9)], 10).is_err());
    }

    #[test]
    fn aicc_drops_noise_covariate() {
        let mut chosen_small = 0;
        let noise = Normal::new(0.0, 0.5).unwrap();
        for rep in 0..100 {
            let mut rng = keyed(100 + rep, 0, 0);
            let mut x = Vec::new();
            let mut t = Vec::new();
            for _ in 0..200 {
                let a: f64 = rng.random_range(0.0..1.0);
                let junk: f64 = rng.random_range(0.0..1.0);
                t.push((3.0 + 0.8 * a + noise.sample(&mut rng)).exp());
                x.push(vec![a, junk]);
            }
            let full = SurvData::new(x, t, vec![true; 200]).unwrap();
            let small = full.select_columns(&[0]);
            let mf = aft_fit(&full, AftKind::LogNormal).unwrap();
            let ms = aft_fit(&small, AftKind::LogNormal).unwrap();
            let (best, _) = aic_select(
                &[("small".into(), ms.loglik, ms.n_params()), ("full".into(), mf.loglik, mf.n_params())],
                200,
            )
            .unwrap();
            chosen_small += usize::from(best == 0);
        }
        assert!(chosen_small >= 80, "{chosen_small}");
    }

    #[test]
    fn dropping_fit_zeroes_separating_column() {
        let mut d = ph_data(200, &[0.5, -0.3], 8);
        // Column 2 is 1 exactly for the 20 shortest times: a monotone likelihood.
        let mut order: Vec<usize> = (0..d.n()).collect();
        order.sort_by(|&a, &b| d.time[a].total_cmp(&d.time[b]));
        for r in d.x.iter_mut() {
            r.push(0.0);
        }
        for &i in &order[..20] {
            d.x[i][2] = 1.0;
            d.event[i] = true;
        }
        assert!(matches!(cox_fit(&d, &CoxOptions::default()), Err(Error::Separation { index: 2, .. })));
        let (m, dropped) = cox_fit_dropping(&d, &CoxOptions::default()).unwrap();
        assert_eq!(dropped, vec![2]);
        assert_eq!(m.beta[2], 0.0);
        let plain = cox_fit(&d.select_columns(&[0, 1]), &CoxOptions::default()).unwrap();
        assert_eq!(&m.beta[..2], &plain.beta[..]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn efron_gradient_is_exact_at_random_points(seed in any::<u64>(), b in proptest::collection::vec(-1.0..1.0f64, 3)) {
            let mut d = ph_data(60, &[0.4, -0.2, 0.1], seed);
            for t in d.time.iter_mut() {
                *t = t.round();
            }
            let pl = efron_loglik(&d, &b);
            for j in 0..3 {
                let h = 1e-6;
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp[j] += h;
                bm[j] -= h;
                let fd = (efron_loglik(&d, &bp).value - efron_loglik(&d, &bm).value) / (2.0 * h);
                prop_assert!((fd - pl.gradient[j]).abs() / pl.gradient[j].abs().max(1.0) < 1e-6);
            }
        }

        #[test]
        fn efron_without_ties_is_plain(seed in any::<u64>(), b in proptest::collection::vec(-1.5..1.5f64, 2)) {
            let d = ph_data(50, &[0.3, 0.3], seed);
            prop_assert!((efron_loglik(&d, &b).value - plain_loglik(&d, &b)).abs() < 1e-12);
        }

        #[test]
        fn lognormal_aft_with_events_is_ols(seed in any::<u64>(), n in 20usize..200) {
            let mut rng = keyed(seed, 1, 0);
            let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0)]).collect();
            let t: Vec<f64> = x.iter().map(|r| (3.0 + 0.5 * r[0] - 0.2 * r[1] + rng.random_range(-0.8..0.8f64)).exp()).collect();
            let m = aft_fit(&SurvData::new(x.clone(), t.clone(), vec![true; n]).unwrap(), AftKind::LogNormal).unwrap();
            let b = ols(&x, &t.iter().map(|v| v.ln()).collect::<Vec<_>>()).unwrap();
            prop_assert!((m.intercept - b[0]).abs() < 1e-8);
            prop_assert!((m.beta[0] - b[1]).abs() < 1e-8);
            prop_assert!((m.beta[1] - b[2]).abs() < 1e-8);
        }
    }
}
