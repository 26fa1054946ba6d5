//! Parametric duration distributions: log-normal, log-logistic, Weibull,
//! generalized F and finite mixtures of these.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::special::{ln_beta, logistic, norm_cdf, norm_pdf, reg_inc_beta_split, softplus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub dist: ParametricDist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParametricDist {
    LogNormal { mu: f64, sigma: f64 },
    LogLogistic { alpha: f64, beta: f64 },
    /// Scale `lambda`, shape `k`.
    Weibull { lambda: f64, k: f64 },
    /// `exp((ln x - mu) / sigma)` follows an F(d1, d2) law.
    GeneralizedF { mu: f64, sigma: f64, d1: f64, d2: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        domain(format!("{name} must be positive and finite, got {v}"))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        domain(format!("{name} must be finite, got {v}"))
    }
}

impl ParametricDist {
    pub fn mixture(parts: Vec<(f64, ParametricDist)>) -> Result<Self> {
        let d = Self::Mixture {
            components: parts
                .into_iter()
                .map(|(weight, dist)| MixtureComponent { weight, dist })
                .collect(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::LogNormal { mu, sigma } => {
                finite("mu", *mu)?;
                positive("sigma", *sigma)
            }
            Self::LogLogistic { alpha, beta } => {
                positive("alpha", *alpha)?;
                positive("beta", *beta)
            }
            Self::Weibull { lambda, k } => {
                positive("lambda", *lambda)?;
                positive("k", *k)
            }
            Self::GeneralizedF { mu, sigma, d1, d2 } => {
                finite("mu", *mu)?;
                positive("sigma", *sigma)?;
                positive("d1", *d1)?;
                positive("d2", *d2)
            }
            Self::Mixture { components } => {
                if components.is_empty() {
                    return domain("mixture needs at least one component");
                }
                let mut total = 0.0;
                for c in components {
                    if !(c.weight >= 0.0) || !c.weight.is_finite() {
                        return domain(format!("mixture weight {} out of range", c.weight));
                    }
                    total += c.weight;
                    c.dist.validate()?;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return domain(format!("mixture weights sum to {total}"));
                }
                Ok(())
            }
        }
    }

    fn check_x(&self, x: f64) -> Result<()> {
        if !(x > 0.0) || !x.is_finite() {
            return domain(format!("x must be a positive number of minutes, got {x}"));
        }
        self.validate()
    }

    pub fn pdf(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        Ok(self.pdf_unchecked(x))
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        Ok(self.cdf_unchecked(x))
    }

    /// Density without validation; callers guarantee `x > 0` and valid parameters.
    pub fn pdf_unchecked(&self, x: f64) -> f64 {
        match self {
            Self::Mixture { components } => components
                .iter()
                .map(|c| c.weight * c.dist.pdf_unchecked(x))
                .sum(),
            _ => self.ln_pdf_unchecked(x).exp(),
        }
    }

    pub fn ln_pdf_unchecked(&self, x: f64) -> f64 {
        let lx = x.ln();
        match *self {
            Self::LogNormal { mu, sigma } => {
                let z = (lx - mu) / sigma;
                norm_pdf(z).ln() - sigma.ln() - lx
            }
            Self::LogLogistic { alpha, beta } => {
                let z = beta * (lx - alpha.ln());
                beta.ln() - lx + z - 2.0 * softplus(z)
            }
            Self::Weibull { lambda, k } => {
                let z = k * (lx - lambda.ln());
                k.ln() - lx + z - z.exp()
            }
            Self::GeneralizedF { mu, sigma, d1, d2 } => {
                // u = ln w where w = exp((ln x - mu)/sigma) ~ F(d1, d2); density of x
                // is f_F(w) * w / (sigma x).
                let u = (lx - mu) / sigma;
                let r = (d1 / d2).ln();
                0.5 * d1 * r + 0.5 * d1 * u
                    - 0.5 * (d1 + d2) * softplus(u + r)
                    - ln_beta(0.5 * d1, 0.5 * d2)
                    - sigma.ln()
                    - lx
            }
            Self::Mixture { .. } => self.pdf_unchecked(x).ln(),
        }
    }

    pub fn cdf_unchecked(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x == f64::INFINITY {
            return 1.0;
        }
        let lx = x.ln();
        match self {
            Self::LogNormal { mu, sigma } => norm_cdf((lx - mu) / sigma),
            Self::LogLogistic { alpha, beta } => logistic(beta * (lx - alpha.ln())),
            Self::Weibull { lambda, k } => -(-(k * (lx - lambda.ln())).exp()).exp_m1(),
            Self::GeneralizedF { mu, sigma, d1, d2 } => {
                let v = (lx - mu) / sigma + (d1 / d2).ln();
                // d1 w / (d1 w + d2) and its complement
                reg_inc_beta_split(0.5 * d1, 0.5 * d2, logistic(v), logistic(-v))
            }
            Self::Mixture { components } => components
                .iter()
                .map(|c| c.weight * c.dist.cdf_unchecked(x))
                .sum::<f64>()
                .min(1.0),
        }
    }

    /// Rough location used to seed the quantile bracket.
    fn quantile_guess(&self, p: f64) -> f64 {
        match *self {
            Self::LogNormal { mu, sigma } => {
                // logit approximation of the probit
                (mu + sigma * 0.6 * (p / (1.0 - p)).ln()).exp()
            }
            Self::LogLogistic { alpha, beta } => alpha * (p / (1.0 - p)).powf(1.0 / beta),
            Self::Weibull { lambda, k } => lambda * (-(-p).ln_1p()).powf(1.0 / k),
            Self::GeneralizedF { mu, .. } => mu.exp(),
            Self::Mixture { ref components } => components
                .iter()
                .map(|c| c.dist.quantile_guess(p))
                .fold(0.0, f64::max),
        }
    }

    /// Inverse CDF by bracketed bisection.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return domain(format!("probability must lie in (0, 1), got {p}"));
        }
        self.validate()?;
        let guess = self.quantile_guess(p);
        let guess = if guess.is_finite() && guess > 0.0 { guess } else { 1.0 };
        let mut lo = 1e-9;
        while self.cdf_unchecked(lo) > p {
            lo *= 0.5;
            if lo < 1e-300 {
                return Ok(lo);
            }
        }
        let mut hi = (10.0 * guess).max(2.0 * lo);
        while self.cdf_unchecked(hi) < p {
            hi *= 2.0;
            if !hi.is_finite() {
                return domain("quantile bracket diverged");
            }
        }
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf_unchecked(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 4.0 * f64::EPSILON * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    pub fn median(&self) -> Result<f64> {
        self.quantile(0.5)
    }

    /// Number of free parameters.
    pub fn n_params(&self) -> usize {
        match self {
            Self::LogNormal { .. } | Self::LogLogistic { .. } | Self::Weibull { .. } => 2,
            Self::GeneralizedF { .. } => 4,
            Self::Mixture { components } => {
                components.iter().map(|c| c.dist.n_params()).sum::<usize>() + components.len() - 1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{E, PI};

    fn ln(mu: f64, sigma: f64) -> ParametricDist {
        ParametricDist::LogNormal { mu, sigma }
    }

    #[test]
    fn pdf_examples() {
        let w = ParametricDist::Weibull { lambda: 1.0, k: 1.0 };
        assert!((w.pdf(1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((ln(0.0, 1.0).pdf(1.0).unwrap() - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn generalized_f_pdf_matches_cdf_derivative() {
        let d = ParametricDist::GeneralizedF { mu: 0.0, sigma: 1.0, d1: 2.0, d2: 2.0 };
        let h = 1e-5;
        let numeric = (d.cdf(1.0 + h).unwrap() - d.cdf(1.0 - h).unwrap()) / (2.0 * h);
        let pdf = d.pdf(1.0).unwrap();
        assert!((pdf - numeric).abs() < 1e-6, "pdf {pdf} vs fd {numeric}");
        assert!((pdf - 0.25).abs() < 1e-12);
        assert!((d.cdf(1.0).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn cdf_examples() {
        let w = ParametricDist::Weibull { lambda: 5.0, k: 2.0 };
        assert!((w.cdf(5.0).unwrap() - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        let ll = ParametricDist::LogLogistic { alpha: 3.0, beta: 2.0 };
        assert!((ll.cdf(3.0).unwrap() - 0.5).abs() < 1e-15);
        let m = ParametricDist::mixture(vec![(0.5, ln(0.0, 1.0)), (0.5, ln(2.0, 1.0))]).unwrap();
        assert!((m.cdf(E).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quantile_examples() {
        let q = ln(3.0, 0.5).quantile(0.5).unwrap();
        assert!((q - 3.0f64.exp()).abs() < 1e-9);
        let w = ParametricDist::Weibull { lambda: 1.0, k: 1.0 };
        let q = w.quantile(1.0 - (-1.0f64).exp()).unwrap();
        assert!((q - 1.0).abs() < 1e-10);
        let m = ParametricDist::mixture(vec![
            (0.7, ParametricDist::Weibull { lambda: 2.0, k: 1.0 }),
            (0.3, ParametricDist::Weibull { lambda: 10.0, k: 1.0 }),
        ])
        .unwrap();
        let q = m.quantile(0.9).unwrap();
        assert!((m.cdf(q).unwrap() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn domain_errors() {
        assert!(ln(0.0, 1.0).pdf(0.0).is_err());
        assert!(ln(0.0, 1.0).cdf(-2.0).is_err());
        assert!(ln(0.0, -1.0).pdf(1.0).is_err());
        assert!(ln(0.0, 1.0).quantile(1.0).is_err());
        assert!(ln(0.0, 1.0).quantile(0.0).is_err());
        assert!(ParametricDist::mixture(vec![(0.6, ln(0.0, 1.0))]).is_err());
        assert!(ParametricDist::mixture(vec![]).is_err());
    }

    #[test]
    fn single_component_mixture_is_identity() {
        let base = ParametricDist::LogLogistic { alpha: 20.0, beta: 3.0 };
        let m = ParametricDist::mixture(vec![(1.0, base.clone())]).unwrap();
        for i in 1..50 {
            let x = i as f64 * 2.3;
            assert!((m.pdf(x).unwrap() - base.pdf(x).unwrap()).abs() < 1e-12);
            assert!((m.cdf(x).unwrap() - base.cdf(x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn weibull_shape_one_is_exponential() {
        let lambda = 37.0;
        let w = ParametricDist::Weibull { lambda, k: 1.0 };
        for i in 1..100 {
            let x = i as f64 * 1.7;
            let expo = (-x / lambda).exp() / lambda;
            assert!((w.pdf(x).unwrap() - expo).abs() < 1e-12);
        }
    }

    /// Composite Simpson of `pdf` over `[q(lo), q(hi)]` in log space.
    pub(crate) fn log_space_mass(d: &ParametricDist, lo: f64, hi: f64) -> f64 {
        let (a, b) = (d.quantile(lo).unwrap().ln(), d.quantile(hi).unwrap().ln());
        let n = 4000;
        let h = (b - a) / n as f64;
        let f = |u: f64| d.pdf_unchecked(u.exp()) * u.exp();
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    fn arb_simple() -> impl Strategy<Value = ParametricDist> {
        prop_oneof![
            (1.0..5.0f64, 0.2..2.0f64).prop_map(|(mu, sigma)| ParametricDist::LogNormal { mu, sigma }),
            (5.0..200.0f64, 0.5..6.0f64).prop_map(|(alpha, beta)| ParametricDist::LogLogistic { alpha, beta }),
            (5.0..200.0f64, 0.4..5.0f64).prop_map(|(lambda, k)| ParametricDist::Weibull { lambda, k }),
            (1.0..5.0f64, 0.2..1.5f64, 0.5..20.0f64, 0.5..20.0f64)
                .prop_map(|(mu, sigma, d1, d2)| ParametricDist::GeneralizedF { mu, sigma, d1, d2 }),
        ]
    }

    pub(crate) fn arb_dist() -> impl Strategy<Value = ParametricDist> {
        prop_oneof![
            3 => arb_simple(),
            1 => proptest::collection::vec((0.1..1.0f64, arb_simple()), 2..4).prop_map(|parts| {
                let total: f64 = parts.iter().map(|p| p.0).sum();
                ParametricDist::mixture(parts.into_iter().map(|(w, d)| (w / total, d)).collect()).unwrap()
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn quantile_inverts_cdf(d in arb_dist(), p in 0.001..0.999f64) {
            let q = d.quantile(p).unwrap();
            prop_assert!((d.cdf(q).unwrap() - p).abs() < 1e-6);
        }

        #[test]
        fn cdf_is_monotone_from_zero(d in arb_dist(), xs in proptest::collection::vec(1e-3..1e4f64, 2..30)) {
            let mut xs = xs;
            xs.sort_by(f64::total_cmp);
            let c: Vec<f64> = xs.iter().map(|&x| d.cdf(x).unwrap()).collect();
            prop_assert!(c.windows(2).all(|w| w[1] >= w[0] - 1e-15));
            prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(d.cdf_unchecked(0.0), 0.0);
            prop_assert!(d.cdf(1e300).unwrap() > 1.0 - 1e-9);
        }

        #[test]
        fn quantile_round_trips_log_spaced_points(d in arb_dist()) {
            let (lo, hi) = (d.quantile(1e-6).unwrap().ln(), d.quantile(1.0 - 1e-6).unwrap().ln());
            for i in 0..20 {
                let x = (lo + (hi - lo) * i as f64 / 19.0).exp();
                let back = d.quantile(d.cdf(x).unwrap()).unwrap();
                prop_assert!((back - x).abs() <= 1e-6 * x, "x {} back {}", x, back);
            }
        }

        #[test]
        fn pdf_integrates_to_one(d in arb_dist()) {
            let mass = log_space_mass(&d, 1e-12, 0.9999);
            prop_assert!((mass - 1.0).abs() < 1e-4 + 1e-6, "mass {}", mass);
        }
    }
}
