//! Covariate encoding and time-varying residual features.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calendar;
use crate::datagen::{self, field, CovValue, Covariates};
use crate::error::{domain, Error, Result};

/// Residual magnitude on a neighbouring link that marks it atypical, km/h.
pub const ATYPICAL_THRESHOLD: f64 = 8.0;
/// Samples in the gradient window: `t-5..=t`.
pub const GRADIENT_SAMPLES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    OneHot { levels: Vec<String> },
    Binary,
    /// Standardized with training mean and sd.
    Continuous { mean: f64, sd: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
}

impl FieldSpec {
    pub fn width(&self) -> usize {
        match &self.kind {
            FieldKind::OneHot { levels } => levels.len(),
            _ => 1,
        }
    }
}

/// Ordered field list with the training statistics needed to encode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub fields: Vec<FieldSpec>,
}

fn one_hot(name: &str, levels: &[&str]) -> FieldSpec {
    FieldSpec {
        name: name.into(),
        kind: FieldKind::OneHot { levels: levels.iter().map(|s| s.to_string()).collect() },
    }
}

fn binary(name: &str) -> FieldSpec {
    FieldSpec { name: name.into(), kind: FieldKind::Binary }
}

impl Schema {
    /// Every incident covariate, with continuous fields standardized on `train`.
    pub fn incident_covariates(train: &[&Covariates]) -> Result<Self> {
        let mut fields = vec![
            one_hot(field::TIME_OF_DAY, &calendar::TIME_OF_DAY),
            one_hot(field::CAPACITY_REDUCTION, &datagen::CAPACITY_BINS),
            one_hot(field::INCIDENT_TYPE, &datagen::INCIDENT_TYPES),
            FieldSpec { name: field::LINK_LENGTH.into(), kind: FieldKind::Continuous { mean: 0.0, sd: 1.0 } },
            binary(field::DOWNSTREAM_ATYPICAL),
            binary(field::UPSTREAM_ATYPICAL),
            one_hot(field::N_VEHICLES, &datagen::VEHICLE_COUNTS),
            binary(field::CASCADE),
            binary(field::ROADWORKS),
            one_hot(field::SECTOR, &datagen::SECTORS),
            one_hot(field::SEASON, &calendar::SEASONS),
        ];
        fields.extend(field::VEHICLE_TYPES.iter().map(|n| binary(n)));
        fields.push(binary(field::WEEKEND));
        let mut schema = Self { fields };
        schema.standardize_on(train)?;
        Ok(schema)
    }

    /// Recompute mean/sd of continuous fields from training records.
    pub fn standardize_on(&mut self, train: &[&Covariates]) -> Result<()> {
        for f in self.fields.iter_mut() {
            if let FieldKind::Continuous { mean, sd } = &mut f.kind {
                let vals = train
                    .iter()
                    .map(|c| match c.get(&f.name) {
                        Some(CovValue::Number(x)) => Ok(*x),
                        _ => Err(missing(&f.name)),
                    })
                    .collect::<Result<Vec<f64>>>()?;
                if vals.is_empty() {
                    return Err(Error::Empty(format!("no training values for `{}`", f.name)));
                }
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
                *mean = m;
                *sd = if v > 0.0 { v.sqrt() } else { 1.0 };
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.fields.iter().map(FieldSpec::width).sum()
    }

    /// Column range of each field in the full encoding.
    pub fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut at = 0;
        self.fields
            .iter()
            .map(|f| {
                let r = at..at + f.width();
                at = r.end;
                (f.name.clone(), r)
            })
            .collect()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns(false)
    }

    /// Column names of the reference-coded design (first level of each
    /// one-hot block dropped).
    pub fn design_names(&self) -> Vec<String> {
        self.columns(true)
    }

    fn columns(&self, reference: bool) -> Vec<String> {
        let mut out = Vec::new();
        for f in &self.fields {
            match &f.kind {
                FieldKind::OneHot { levels } => {
                    let skip = usize::from(reference);
                    out.extend(levels.iter().skip(skip).map(|l| format!("{}={}", f.name, l)));
                }
                _ => out.push(f.name.clone()),
            }
        }
        out
    }

    /// Design-column groups: field name and column range in the reference coding.
    pub fn design_groups(&self) -> Vec<(String, Range<usize>)> {
        let mut at = 0;
        self.fields
            .iter()
            .map(|f| {
                let w = match &f.kind {
                    FieldKind::OneHot { levels } => levels.len() - 1,
                    _ => 1,
                };
                let r = at..at + w;
                at = r.end;
                (f.name.clone(), r)
            })
            .collect()
    }

    /// Full encoding: one-hot blocks sum to exactly 1.
    pub fn encode(&self, cov: &Covariates) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width());
        for f in &self.fields {
            encode_field(f, cov, false, &mut out)?;
        }
        Ok(out)
    }

    /// Reference coding for regression designs.
    pub fn encode_design(&self, cov: &Covariates) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for f in &self.fields {
            encode_field(f, cov, true, &mut out)?;
        }
        Ok(out)
    }

    /// Keep only the named fields, in schema order.
    pub fn restricted(&self, names: &[&str]) -> Self {
        Self {
            fields: self
                .fields
                .iter()
                .filter(|f| names.contains(&f.name.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn missing(name: &str) -> Error {
    Error::Encoding { field: name.into(), level: "<missing>".into() }
}

fn encode_field(f: &FieldSpec, cov: &Covariates, reference: bool, out: &mut Vec<f64>) -> Result<()> {
    let value = cov.get(&f.name).ok_or_else(|| missing(&f.name))?;
    match (&f.kind, value) {
        (FieldKind::OneHot { levels }, CovValue::Level(l)) => {
            let k = levels.iter().position(|x| x == l).ok_or_else(|| Error::Encoding {
                field: f.name.clone(),
                level: l.clone(),
            })?;
            let skip = usize::from(reference);
            out.extend((skip..levels.len()).map(|j| f64::from(j == k)));
        }
        (FieldKind::Binary, CovValue::Flag(b)) => out.push(f64::from(*b)),
        (FieldKind::Continuous { mean, sd }, CovValue::Number(x)) => out.push((x - mean) / sd),
        (_, other) => {
            return Err(Error::Encoding { field: f.name.clone(), level: format!("{other:?}") });
        }
    }
    Ok(())
}

/// Residual levels and 5-minute OLS gradients at one prediction time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicSnapshot {
    pub at: usize,
    /// Speed, flow, travel time.
    pub levels: [f64; 3],
    /// Least-squares slope per minute over `at-5..=at`.
    pub gradients: [f64; 3],
}

impl DynamicSnapshot {
    pub fn to_vec(&self) -> Vec<f64> {
        self.levels.iter().chain(self.gradients.iter()).copied().collect()
    }

    pub const NAMES: [&'static str; 6] = [
        "speed_level",
        "flow_level",
        "travel_time_level",
        "speed_gradient",
        "flow_gradient",
        "travel_time_gradient",
    ];
}

/// OLS slope of `ys` against `0..ys.len()`.
pub fn ols_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let kbar = (n - 1.0) / 2.0;
    let ybar = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, y) in ys.iter().enumerate() {
        let dk = k as f64 - kbar;
        num += dk * (y - ybar);
        den += dk * dk;
    }
    num / den
}

/// Snapshot at index `t` of three aligned residual series.
pub fn snapshot(residuals: [&[f64]; 3], t: usize) -> Result<DynamicSnapshot> {
    let n = residuals.iter().map(|r| r.len()).min().unwrap_or(0);
    if t + 1 < GRADIENT_SAMPLES || t >= n {
        return domain(format!("snapshot at {t} needs indices {}..={t} within length {n}", t as i64 - 5));
    }
    let lo = t + 1 - GRADIENT_SAMPLES;
    let mut levels = [0.0; 3];
    let mut gradients = [0.0; 3];
    for c in 0..3 {
        levels[c] = residuals[c][t];
        gradients[c] = ols_slope(&residuals[c][lo..=t]);
    }
    Ok(DynamicSnapshot { at: t, levels, gradients })
}

/// Per-channel residual scale from training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub scale: [f64; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self { scale: [1.0; 3] }
    }
}

impl ChannelStats {
    /// Root-mean-square of residual samples per channel.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = [&'a [f64]; 3]>) -> Self {
        let mut ss = [0.0; 3];
        let mut n = [0usize; 3];
        for chans in samples {
            for c in 0..3 {
                ss[c] += chans[c].iter().map(|x| x * x).sum::<f64>();
                n[c] += chans[c].len();
            }
        }
        let mut scale = [1.0; 3];
        for c in 0..3 {
            if n[c] > 0 && ss[c] > 0.0 {
                scale[c] = (ss[c] / n[c] as f64).sqrt();
            }
        }
        Self { scale }
    }
}

/// `3 x (w + 1)` residual slice ending at a prediction time, row-major by channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualWindow {
    pub width: usize,
    pub data: Vec<f64>,
}

impl ResidualWindow {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.width..(c + 1) * self.width]
    }
}

/// Window over indices `t-w..=t`, each channel divided by its training scale.
pub fn window(residuals: [&[f64]; 3], t: usize, w: usize, stats: &ChannelStats) -> Result<ResidualWindow> {
    let n = residuals.iter().map(|r| r.len()).min().unwrap_or(0);
    if t < w || t >= n {
        return domain(format!("window of {w} minutes at {t} exceeds available history"));
    }
    let width = w + 1;
    let mut data = Vec::with_capacity(3 * width);
    for c in 0..3 {
        data.extend(residuals[c][t - w..=t].iter().map(|x| x / stats.scale[c]));
    }
    Ok(ResidualWindow { width, data })
}

/// Neighbour-link state at flag time.
pub fn is_atypical(neighbour_speed_residual: &[f64], minute: usize) -> bool {
    neighbour_speed_residual
        .get(minute)
        .is_some_and(|r| r.abs() > ATYPICAL_THRESHOLD)
}

/// Residuals around one incident: from `pre` minutes before the start
/// through the labeled end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidentTrace {
    pub pre: usize,
    pub channels: [Vec<f64>; 3],
}

/// Minutes of pre-incident history kept in traces.
pub const TRACE_PRE: usize = 70;

impl IncidentTrace {
    pub fn cut(residuals: [&[f64]; 3], start: usize, end: usize) -> Result<Self> {
        if start < TRACE_PRE {
            return domain(format!("incident at {start} has less than {TRACE_PRE} minutes of history"));
        }
        let n = residuals.iter().map(|r| r.len()).min().unwrap_or(0);
        let end = end.min(n);
        let lo = start - TRACE_PRE;
        Ok(Self {
            pre: TRACE_PRE,
            channels: [
                residuals[0][lo..end].to_vec(),
                residuals[1][lo..end].to_vec(),
                residuals[2][lo..end].to_vec(),
            ],
        })
    }

    fn slices(&self) -> [&[f64]; 3] {
        [&self.channels[0], &self.channels[1], &self.channels[2]]
    }

    /// Minutes since the start that the trace covers.
    pub fn span(&self) -> usize {
        self.channels[0].len().saturating_sub(self.pre)
    }

    /// Snapshot `t` minutes after the start.
    pub fn snapshot(&self, t: usize) -> Result<DynamicSnapshot> {
        let mut s = snapshot(self.slices(), self.pre + t)?;
        s.at = t;
        Ok(s)
    }

    pub fn window(&self, t: usize, w: usize, stats: &ChannelStats) -> Result<ResidualWindow> {
        window(self.slices(), self.pre + t, w, stats)
    }

    /// Channel slices over `start - lookback ..= start + t`.
    pub fn history(&self, t: usize, lookback: usize) -> [&[f64]; 3] {
        let hi = (self.pre + t + 1).min(self.channels[0].len());
        let lo = self.pre.saturating_sub(lookback).min(hi);
        [&self.channels[0][lo..hi], &self.channels[1][lo..hi], &self.channels[2][lo..hi]]
    }
}
