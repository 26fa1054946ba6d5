//! Synthetic link time series with injected incidents.
//!
//! Each link carries a weekly seasonal speed/flow pattern with rush-hour
//! dips. Incidents draw covariates from fixed marginals, a log-normal
//! duration `exp(intercept + x'b + e)`, and depress the speed for exactly
//! that many minutes.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::calendar::{self, MINUTES_PER_DAY, MINUTES_PER_WEEK};
use crate::error::{domain, Error, Result};
use crate::par;
use crate::rng::{keyed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Speed,
    Flow,
    TravelTime,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Speed, Channel::Flow, Channel::TravelTime];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Speed => "speed",
            Channel::Flow => "flow",
            Channel::TravelTime => "travel_time",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "speed" => Ok(Channel::Speed),
            "flow" => Ok(Channel::Flow),
            "travel_time" => Ok(Channel::TravelTime),
            other => domain(format!("unknown channel `{other}`")),
        }
    }
}

/// A covariate value: categorical level, binary flag or number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovValue {
    Flag(bool),
    Number(f64),
    Level(String),
}

impl CovValue {
    pub fn level(s: &str) -> Self {
        CovValue::Level(s.to_string())
    }
}

pub type Covariates = BTreeMap<String, CovValue>;

pub mod field {
    pub const TIME_OF_DAY: &str = "time_of_day";
    pub const CAPACITY_REDUCTION: &str = "capacity_reduction";
    pub const INCIDENT_TYPE: &str = "incident_type";
    pub const LINK_LENGTH: &str = "link_length";
    pub const DOWNSTREAM_ATYPICAL: &str = "downstream_atypical";
    pub const UPSTREAM_ATYPICAL: &str = "upstream_atypical";
    pub const N_VEHICLES: &str = "n_vehicles";
    pub const CASCADE: &str = "cascade";
    pub const ROADWORKS: &str = "roadworks";
    pub const SECTOR: &str = "sector";
    pub const SEASON: &str = "season";
    pub const WEEKEND: &str = "weekend";
    pub const VEHICLE_TYPES: [&str; 5] = [
        "vehicle_car",
        "vehicle_motorcycle",
        "vehicle_lorry",
        "vehicle_trailer",
        "vehicle_articulated",
    ];
}

pub const CAPACITY_BINS: [&str; 4] = ["0-25", "25-50", "50-75", "75-100"];
pub const INCIDENT_TYPES: [&str; 4] = [
    "accident",
    "vehicle_obstruction",
    "non_vehicle_obstruction",
    "abnormal_traffic",
];
pub const VEHICLE_COUNTS: [&str; 4] = ["1", "2", "3", "4+"];
pub const SECTORS: [&str; 8] = ["n", "ne", "e", "se", "s", "sw", "w", "nw"];

const CAPACITY_PROBS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
const INCIDENT_TYPE_PROBS: [f64; 4] = [0.3, 0.35, 0.15, 0.2];
const VEHICLE_COUNT_PROBS: [f64; 4] = [0.45, 0.3, 0.15, 0.1];
const VEHICLE_TYPE_PROBS: [f64; 5] = [0.8, 0.05, 0.3, 0.08, 0.12];
const CASCADE_PROB: f64 = 0.1;
const ROADWORKS_PROB: f64 = 0.12;
const LINK_LENGTH_RANGE: (f64, f64) = (500.0, 3000.0);

/// Minimum in-incident speed drop below the seasonal pattern, km/h.
pub const DEPRESSION_FLOOR: f64 = 14.0;
/// Incidents start at least this many minutes into the data.
pub const LEAD_IN: usize = 120;
const GAP_BEFORE: usize = 90;
const GAP_AFTER: usize = 30;

/// Temporal profile of the speed drop over an incident.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Linear drop to the deepest point at mid-incident, linear recovery.
    Symmetric,
    /// Deepest within the first tenth, then a long recovery.
    FastDrop,
    /// Short ramps around a long flat bottom.
    Plateau,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Symmetric, ShapeKind::FastDrop, ShapeKind::Plateau];

    /// Relative depth in [0, 1] at fraction `u` in [0, 1) of the incident.
    pub fn profile(self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            ShapeKind::Symmetric => 1.0 - (2.0 * u - 1.0).abs(),
            ShapeKind::FastDrop => {
                if u < 0.1 {
                    u / 0.1
                } else {
                    (1.0 - u) / 0.9
                }
            }
            ShapeKind::Plateau => (u / 0.15).min((1.0 - u) / 0.15).min(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub a: String,
    pub b: String,
    pub coef: f64,
}

/// Ground-truth effects on log duration.
///
/// Keys are `field=level` for categorical levels, or a bare field name for
/// flags (0/1) and numbers (used as-is).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub intercept: f64,
    #[serde(default)]
    pub effects: BTreeMap<String, f64>,
    #[serde(default)]
    pub interactions: Vec<Interaction>,
}

/// Value of one effect term for a covariate record.
pub fn term_value(key: &str, cov: &Covariates) -> f64 {
    if let Some((name, level)) = key.split_once('=') {
        match cov.get(name) {
            Some(CovValue::Level(l)) => f64::from(l == level),
            Some(CovValue::Flag(b)) => f64::from((level == "true") == *b),
            _ => 0.0,
        }
    } else {
        match cov.get(key) {
            Some(CovValue::Flag(b)) => f64::from(*b),
            Some(CovValue::Number(x)) => *x,
            _ => 0.0,
        }
    }
}

impl EffectSpec {
    pub fn intercept_only(intercept: f64) -> Self {
        Self { intercept, effects: BTreeMap::new(), interactions: Vec::new() }
    }

    /// Additive effects only.
    pub fn linear() -> Self {
        let effects = [
            ("capacity_reduction=25-50", 0.15),
            ("capacity_reduction=50-75", 0.35),
            ("capacity_reduction=75-100", 0.6),
            ("incident_type=accident", 0.45),
            ("incident_type=non_vehicle_obstruction", -0.2),
            ("incident_type=abnormal_traffic", -0.35),
            ("n_vehicles=2", 0.1),
            ("n_vehicles=3", 0.2),
            ("n_vehicles=4+", 0.35),
            ("vehicle_lorry", 0.2),
            ("vehicle_articulated", 0.25),
            ("roadworks", 0.2),
            ("cascade", 0.15),
            ("weekend", -0.1),
            ("time_of_day=night", -0.15),
            ("time_of_day=morning_rush", 0.1),
            ("link_length", 0.0001),
        ];
        Self {
            intercept: 3.3,
            effects: effects.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            interactions: Vec::new(),
        }
    }

    /// Weak main effects; most of the signal sits in pairwise interactions
    /// that an additive model cannot represent.
    pub fn nonlinear() -> Self {
        let effects = [
            ("capacity_reduction=75-100", 0.2),
            ("incident_type=accident", 0.6),
            ("time_of_day=night", 0.5),
            ("vehicle_lorry", 0.5),
            ("roadworks", 0.15),
        ];
        let interactions = [
            ("incident_type=accident", "time_of_day=night", -1.2),
            ("vehicle_lorry", "incident_type=accident", -1.0),
            ("vehicle_lorry", "time_of_day=night", -1.0),
            ("capacity_reduction=0-25", "weekend", 0.7),
        ];
        Self {
            intercept: 3.5,
            effects: effects.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            interactions: interactions
                .iter()
                .map(|&(a, b, coef)| Interaction { a: a.into(), b: b.into(), coef })
                .collect(),
        }
    }

    /// `intercept + x'b` including interactions.
    pub fn linear_predictor(&self, cov: &Covariates) -> f64 {
        let main: f64 = self.effects.iter().map(|(k, c)| c * term_value(k, cov)).sum();
        let inter: f64 = self
            .interactions
            .iter()
            .map(|i| i.coef * term_value(&i.a, cov) * term_value(&i.b, cov))
            .sum();
        self.intercept + main + inter
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Linear,
    Nonlinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_links: usize,
    pub weeks: usize,
    pub seed: u64,
    /// Expected incidents per link-week.
    pub incident_rate: f64,
    pub effect_spec: EffectSpec,
    /// Standard deviation of the log-duration noise.
    pub noise_sd: f64,
    /// Per-minute noise for speed (km/h), flow (veh/min), travel time (s).
    pub channel_noise_sd: [f64; 3],
    /// Shapes drawn uniformly per incident.
    pub shapes: Vec<ShapeKind>,
    pub max_attempts: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_links: 20,
            weeks: 8,
            seed: 42,
            incident_rate: 2.0,
            effect_spec: EffectSpec::linear(),
            noise_sd: 0.5,
            channel_noise_sd: [2.0, 1.5, 3.0],
            shapes: ShapeKind::ALL.to_vec(),
            max_attempts: 1000,
        }
    }
}

impl SyntheticConfig {
    pub fn preset(preset: Preset) -> Self {
        let effect_spec = match preset {
            Preset::Linear => EffectSpec::linear(),
            Preset::Nonlinear => EffectSpec::nonlinear(),
        };
        Self { effect_spec, ..Self::default() }
    }

    pub fn n_minutes(&self) -> usize {
        self.weeks * MINUTES_PER_WEEK
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_links == 0 || self.weeks == 0 {
            return domain("n_links and weeks must be at least 1");
        }
        if !(self.incident_rate >= 0.0) || !self.incident_rate.is_finite() {
            return domain(format!("incident_rate must be non-negative, got {}", self.incident_rate));
        }
        if !(self.noise_sd >= 0.0) || self.channel_noise_sd.iter().any(|s| !(*s >= 0.0)) {
            return domain("noise standard deviations must be non-negative");
        }
        if self.shapes.is_empty() {
            return domain("at least one incident shape is required");
        }
        if self.max_attempts == 0 {
            return domain("max_attempts must be at least 1");
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::fs::File::open(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Static per-link attributes and seasonal pattern parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkInfo {
    pub link_id: usize,
    pub length_m: f64,
    pub sector: String,
    pub free_speed: f64,
    pub morning_dip: f64,
    pub evening_dip: f64,
    pub flow_scale: f64,
}

fn bump(h: f64, centre: f64, width: f64) -> f64 {
    (-0.5 * ((h - centre) / width).powi(2)).exp()
}

impl LinkInfo {
    fn draw(seed: u64, link_id: usize) -> Self {
        let mut rng = keyed(seed, link_id as u64, 0);
        Self {
            link_id,
            length_m: rng.random_range(LINK_LENGTH_RANGE.0..LINK_LENGTH_RANGE.1),
            sector: SECTORS[link_id % SECTORS.len()].to_string(),
            free_speed: rng.random_range(95.0..110.0),
            morning_dip: rng.random_range(15.0..30.0),
            evening_dip: rng.random_range(20.0..35.0),
            flow_scale: rng.random_range(0.7..1.3),
        }
    }

    /// Noise-free (speed km/h, flow veh/min) at a minute index.
    pub fn seasonal(&self, minute: usize) -> (f64, f64) {
        let mow = minute % MINUTES_PER_WEEK;
        let h = (mow % MINUTES_PER_DAY) as f64 / 60.0;
        if mow / MINUTES_PER_DAY < 5 {
            let speed = self.free_speed
                - self.morning_dip * bump(h, 8.0, 0.8)
                - self.evening_dip * bump(h, 17.5, 1.0);
            let flow = 8.0
                + 40.0 * (bump(h, 8.0, 1.2) + 0.9 * bump(h, 17.5, 1.5))
                + 25.0 * bump(h, 13.0, 4.0);
            (speed, flow * self.flow_scale)
        } else {
            let speed = self.free_speed - 0.3 * self.morning_dip * bump(h, 13.0, 2.5);
            let flow = 8.0 + 30.0 * bump(h, 14.0, 3.5);
            (speed, flow * self.flow_scale)
        }
    }

    pub fn travel_time(&self, speed_kmh: f64) -> f64 {
        self.length_m * 3.6 / speed_kmh
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthIncident {
    pub id: u64,
    pub link_id: usize,
    /// Minute index at which the incident flag is raised.
    pub start: usize,
    /// Exact drawn duration in minutes.
    pub duration: f64,
    /// Depressed minutes `start..start + span`, `span = max(1, round(duration))`.
    pub span: usize,
    /// Minute the operator flag is cleared (exclusive).
    pub flag_end: usize,
    pub shape: ShapeKind,
    /// Deepest speed drop, km/h.
    pub depth: f64,
    /// `intercept + x'b` for this incident.
    pub log_mean: f64,
    pub covariates: Covariates,
}

impl GroundTruthIncident {
    /// Speed drop (km/h) at `minute`, zero outside the incident.
    pub fn depression(&self, minute: usize) -> f64 {
        if minute < self.start || minute >= self.start + self.span {
            return 0.0;
        }
        let u = (minute - self.start) as f64 / self.span as f64;
        DEPRESSION_FLOOR + (self.depth - DEPRESSION_FLOOR) * self.shape.profile(u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub link_id: usize,
    pub channel: Channel,
    pub values: Vec<f64>,
}

/// Everything generated for one link.
#[derive(Clone, Debug)]
pub struct LinkData {
    pub info: LinkInfo,
    /// Speed, flow, travel time, in [`Channel::ALL`] order.
    pub series: [RawSeries; 3],
    pub incidents: Vec<GroundTruthIncident>,
}

impl LinkData {
    pub fn channel(&self, c: Channel) -> &RawSeries {
        &self.series[c.index()]
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: SyntheticConfig,
    pub links: Vec<LinkData>,
}

impl Corpus {
    pub fn incidents(&self) -> impl Iterator<Item = &GroundTruthIncident> {
        self.links.iter().flat_map(|l| l.incidents.iter())
    }

    pub fn n_minutes(&self) -> usize {
        self.config.n_minutes()
    }
}

fn pick<'a>(rng: &mut Rng, levels: &[&'a str], probs: &[f64]) -> &'a str {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (l, p) in levels.iter().zip(probs) {
        acc += p;
        if u < acc {
            return l;
        }
    }
    levels[levels.len() - 1]
}

/// Covariates fixed by the start minute and the link.
pub fn context_covariates(info: &LinkInfo, start: usize) -> Covariates {
    let mut cov = Covariates::new();
    cov.insert(field::TIME_OF_DAY.into(), CovValue::level(calendar::time_of_day(start)));
    cov.insert(field::WEEKEND.into(), CovValue::Flag(calendar::is_weekend(start)));
    cov.insert(field::SEASON.into(), CovValue::level(calendar::season(start)));
    cov.insert(field::SECTOR.into(), CovValue::Level(info.sector.clone()));
    cov.insert(field::LINK_LENGTH.into(), CovValue::Number(info.length_m));
    cov
}

fn draw_incident_covariates(rng: &mut Rng, cov: &mut Covariates) {
    cov.insert(
        field::CAPACITY_REDUCTION.into(),
        CovValue::level(pick(rng, &CAPACITY_BINS, &CAPACITY_PROBS)),
    );
    cov.insert(
        field::INCIDENT_TYPE.into(),
        CovValue::level(pick(rng, &INCIDENT_TYPES, &INCIDENT_TYPE_PROBS)),
    );
    cov.insert(
        field::N_VEHICLES.into(),
        CovValue::level(pick(rng, &VEHICLE_COUNTS, &VEHICLE_COUNT_PROBS)),
    );
    for (name, p) in field::VEHICLE_TYPES.iter().zip(VEHICLE_TYPE_PROBS) {
        cov.insert((*name).into(), CovValue::Flag(rng.random::<f64>() < p));
    }
    cov.insert(field::CASCADE.into(), CovValue::Flag(rng.random::<f64>() < CASCADE_PROB));
    cov.insert(field::ROADWORKS.into(), CovValue::Flag(rng.random::<f64>() < ROADWORKS_PROB));
}

fn capacity_fraction(cov: &Covariates) -> f64 {
    match cov.get(field::CAPACITY_REDUCTION) {
        Some(CovValue::Level(l)) => match l.as_str() {
            "0-25" => 0.125,
            "25-50" => 0.375,
            "50-75" => 0.625,
            _ => 0.875,
        },
        _ => 0.5,
    }
}

fn draw_incidents(cfg: &SyntheticConfig, info: &LinkInfo) -> Result<Vec<GroundTruthIncident>> {
    let n_minutes = cfg.n_minutes();
    if cfg.incident_rate == 0.0 || n_minutes <= LEAD_IN + 1 {
        return Ok(Vec::new());
    }
    let link = info.link_id as u64;
    let mut count_rng = keyed(cfg.seed, link, 1);
    let lambda = cfg.incident_rate * cfg.weeks as f64;
    let count = Poisson::new(lambda)
        .map_err(|e| Error::Generation(format!("bad incident rate: {e}")))?
        .sample(&mut count_rng) as usize;
    let noise = Normal::new(0.0, cfg.noise_sd)
        .map_err(|e| Error::Generation(format!("bad noise_sd: {e}")))?;

    let mut out: Vec<GroundTruthIncident> = Vec::with_capacity(count);
    let mut busy: Vec<(usize, usize)> = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng = keyed(cfg.seed, link, 16 + k as u64);
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            let start = rng.random_range(LEAD_IN..n_minutes);
            let mut cov = context_covariates(info, start);
            draw_incident_covariates(&mut rng, &mut cov);
            let log_mean = cfg.effect_spec.linear_predictor(&cov);
            let duration = (log_mean + noise.sample(&mut rng)).exp();
            let span = (duration.round() as usize).max(1);
            let lo = start.saturating_sub(GAP_BEFORE);
            let hi = start + span + GAP_AFTER;
            if busy.iter().any(|&(a, b)| lo < b && a < hi) {
                continue;
            }
            let shape = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
            let depth = DEPRESSION_FLOOR + 8.0 + 38.0 * capacity_fraction(&cov) + rng.random_range(0.0..8.0);
            let flag_end = start + ((span as f64) * rng.random_range(0.6..1.4)).round().max(1.0) as usize;
            busy.push((lo, hi));
            out.push(GroundTruthIncident {
                id: (link << 24) | k as u64,
                link_id: info.link_id,
                start,
                duration,
                span,
                flag_end,
                shape,
                depth,
                log_mean,
                covariates: cov,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place incident {k} on link {} without overlap after {} attempts",
                info.link_id, cfg.max_attempts
            )));
        }
    }
    out.sort_by_key(|i| i.start);
    Ok(out)
}

/// Generate one link: seasonal pattern, incidents, noisy channels.
pub fn generate_link(cfg: &SyntheticConfig, link_id: usize) -> Result<LinkData> {
    cfg.validate()?;
    let info = LinkInfo::draw(cfg.seed, link_id);
    let incidents = draw_incidents(cfg, &info)?;
    let n = cfg.n_minutes();

    let mut drop = vec![0.0; n];
    let mut flow_factor = vec![1.0; n];
    for inc in &incidents {
        let cap = capacity_fraction(&inc.covariates);
        for m in inc.start..(inc.start + inc.span).min(n) {
            let d = inc.depression(m);
            drop[m] = d;
            flow_factor[m] = 1.0 - 0.6 * cap * d / inc.depth;
        }
    }

    let mut rng = keyed(cfg.seed, link_id as u64, 2);
    let [sd_speed, sd_flow, sd_tt] = cfg.channel_noise_sd;
    let mut speed = Vec::with_capacity(n);
    let mut flow = Vec::with_capacity(n);
    let mut travel = Vec::with_capacity(n);
    for m in 0..n {
        let (s0, f0) = info.seasonal(m);
        let e: [f64; 3] = [
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
        ];
        let s = (s0 - drop[m] + sd_speed * e[0]).max(5.0);
        speed.push(s);
        flow.push((f0 * flow_factor[m] + sd_flow * e[1]).max(0.0));
        travel.push(info.travel_time(s) + sd_tt * e[2]);
    }
    let series = [
        RawSeries { link_id, channel: Channel::Speed, values: speed },
        RawSeries { link_id, channel: Channel::Flow, values: flow },
        RawSeries { link_id, channel: Channel::TravelTime, values: travel },
    ];
    Ok(LinkData { info, series, incidents })
}

/// Generate every link. Links are independent, so this runs in parallel.
pub fn generate_corpus(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.validate()?;
    let links = par::map_range(cfg.n_links, |l| generate_link(cfg, l))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { config: cfg.clone(), links })
}

/// Declared sampling distributions, for audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    /// Level probabilities per categorical field.
    pub categorical: BTreeMap<String, Vec<(String, f64)>>,
    /// Probability of `true` per binary field.
    pub binary: BTreeMap<String, f64>,
    /// (low, high) per continuous field.
    pub continuous: BTreeMap<String, (f64, f64)>,
    /// Time-of-day bins as half-open (start, end) minute-of-day ranges; night wraps midnight.
    pub time_of_day_bins: Vec<(String, usize, usize)>,
    /// Capacity-reduction bins as (low %, high %).
    pub capacity_bins: Vec<(String, f64, f64)>,
}

impl Marginals {
    /// Expected value of an effect term under independent marginals.
    pub fn expected_term(&self, key: &str) -> f64 {
        if let Some((name, level)) = key.split_once('=') {
            if let Some(levels) = self.categorical.get(name) {
                return levels.iter().find(|(l, _)| l == level).map_or(0.0, |(_, p)| *p);
            }
            if let Some(p) = self.binary.get(name) {
                return if level == "true" { *p } else { 1.0 - p };
            }
            0.0
        } else if let Some(p) = self.binary.get(key) {
            *p
        } else if let Some((lo, hi)) = self.continuous.get(key) {
            0.5 * (lo + hi)
        } else {
            0.0
        }
    }

    /// `intercept + E[x]'b`, treating covariates as independent.
    pub fn expected_linear_predictor(&self, spec: &EffectSpec) -> f64 {
        let main: f64 = spec.effects.iter().map(|(k, c)| c * self.expected_term(k)).sum();
        let inter: f64 = spec
            .interactions
            .iter()
            .map(|i| i.coef * self.expected_term(&i.a) * self.expected_term(&i.b))
            .sum();
        spec.intercept + main + inter
    }
}

fn levels_with(levels: &[&str], probs: &[f64]) -> Vec<(String, f64)> {
    levels.iter().zip(probs).map(|(l, p)| (l.to_string(), *p)).collect()
}

pub fn covariate_marginals(cfg: &SyntheticConfig) -> Marginals {
    let mut categorical = BTreeMap::new();
    let tod_bins = vec![
        ("morning_rush".to_string(), 360, 540),
        ("afternoon".to_string(), 540, 900),
        ("evening_rush".to_string(), 900, 1080),
        ("night".to_string(), 1080, 360),
    ];
    let day = MINUTES_PER_DAY as f64;
    categorical.insert(
        field::TIME_OF_DAY.to_string(),
        tod_bins
            .iter()
            .map(|(l, a, b)| (l.clone(), ((b + MINUTES_PER_DAY - a) % MINUTES_PER_DAY) as f64 / day))
            .collect(),
    );
    categorical.insert(field::CAPACITY_REDUCTION.into(), levels_with(&CAPACITY_BINS, &CAPACITY_PROBS));
    categorical.insert(field::INCIDENT_TYPE.into(), levels_with(&INCIDENT_TYPES, &INCIDENT_TYPE_PROBS));
    categorical.insert(field::N_VEHICLES.into(), levels_with(&VEHICLE_COUNTS, &VEHICLE_COUNT_PROBS));

    let n_links = cfg.n_links.max(1);
    let sector_probs: Vec<f64> = (0..SECTORS.len())
        .map(|s| (0..n_links).filter(|l| l % SECTORS.len() == s).count() as f64 / n_links as f64)
        .collect();
    categorical.insert(field::SECTOR.into(), levels_with(&SECTORS, &sector_probs));

    // Seasons by share of minutes after the lead-in, sampled per day.
    let n = cfg.n_minutes().max(LEAD_IN + 1);
    let mut season_counts = [0usize; 4];
    let mut total = 0usize;
    let mut d = LEAD_IN / MINUTES_PER_DAY;
    while d * MINUTES_PER_DAY < n {
        let s = calendar::season(d * MINUTES_PER_DAY);
        season_counts[calendar::SEASONS.iter().position(|&x| x == s).unwrap_or(0)] += 1;
        total += 1;
        d += 1;
    }
    let season_probs: Vec<f64> = season_counts.iter().map(|&c| c as f64 / total as f64).collect();
    categorical.insert(field::SEASON.into(), levels_with(&calendar::SEASONS, &season_probs));

    let mut binary = BTreeMap::new();
    binary.insert(field::WEEKEND.to_string(), 2.0 / 7.0);
    binary.insert(field::CASCADE.to_string(), CASCADE_PROB);
    binary.insert(field::ROADWORKS.to_string(), ROADWORKS_PROB);
    for (name, p) in field::VEHICLE_TYPES.iter().zip(VEHICLE_TYPE_PROBS) {
        binary.insert(name.to_string(), p);
    }

    let mut continuous = BTreeMap::new();
    continuous.insert(field::LINK_LENGTH.to_string(), LINK_LENGTH_RANGE);

    Marginals {
        categorical,
        binary,
        continuous,
        time_of_day_bins: tod_bins,
        capacity_bins: vec![
            ("0-25".into(), 0.0, 25.0),
            ("25-50".into(), 25.0, 50.0),
            ("50-75".into(), 50.0, 75.0),
            ("75-100".into(), 75.0, 100.0),
        ],
    }
}

/// Write series as `link_id,channel,minute_index,value`.
pub fn write_series_csv<'a, W: Write>(
    out: W,
    series: impl IntoIterator<Item = &'a RawSeries>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["link_id", "channel", "minute_index", "value"])?;
    for s in series {
        let link = s.link_id.to_string();
        for (m, v) in s.values.iter().enumerate() {
            w.write_record([link.as_str(), s.channel.as_str(), &m.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read series written by [`write_series_csv`]; rows may arrive in any order
/// but every minute must be present.
pub fn read_series_csv<R: std::io::Read>(input: R) -> Result<Vec<RawSeries>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut map: BTreeMap<(usize, Channel), Vec<Option<f64>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return domain(format!("series row has {} fields, expected 4", rec.len()));
        }
        let parse_err = |what: &str| Error::Domain(format!("bad {what} in series row {rec:?}"));
        let link: usize = rec[0].parse().map_err(|_| parse_err("link_id"))?;
        let channel = Channel::parse(&rec[1])?;
        let m: usize = rec[2].parse().map_err(|_| parse_err("minute_index"))?;
        let v: f64 = rec[3].parse().map_err(|_| parse_err("value"))?;
        let vals = map.entry((link, channel)).or_default();
        if vals.len() <= m {
            vals.resize(m + 1, None);
        }
        vals[m] = Some(v);
    }
    map.into_iter()
        .map(|((link_id, channel), vals)| {
            let values = vals
                .into_iter()
                .enumerate()
                .map(|(m, v)| {
                    v.ok_or_else(|| {
                        Error::Domain(format!("link {link_id} {} missing minute {m}", channel.as_str()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RawSeries { link_id, channel, values })
        })
        .collect()
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize, W: Write>(out: W, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(out);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: std::io::Read>(input: R) -> Result<Vec<T>> {
    std::io::BufReader::new(input)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// File names used by [`Corpus::save`].
pub const CORPUS_FILES: [&str; 4] = ["config.json", "links.json", "series.csv", "incidents.jsonl"];

impl Corpus {
    /// Write config, link attributes, series (CSV) and incidents (JSONL) to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let create = |name: &str| -> Result<BufWriter<std::fs::File>> {
            Ok(BufWriter::new(std::fs::File::create(dir.join(name))?))
        };
        serde_json::to_writer_pretty(create(CORPUS_FILES[0])?, &self.config)?;
        let infos: Vec<&LinkInfo> = self.links.iter().map(|l| &l.info).collect();
        serde_json::to_writer_pretty(create(CORPUS_FILES[1])?, &infos)?;
        write_series_csv(create(CORPUS_FILES[2])?, self.links.iter().flat_map(|l| l.series.iter()))?;
        write_jsonl(create(CORPUS_FILES[3])?, self.incidents())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let open = |name: &str| -> Result<std::io::BufReader<std::fs::File>> {
            Ok(std::io::BufReader::new(std::fs::File::open(dir.join(name))?))
        };
        let config: SyntheticConfig = serde_json::from_reader(open(CORPUS_FILES[0])?)?;
        let infos: Vec<LinkInfo> = serde_json::from_reader(open(CORPUS_FILES[1])?)?;
        let mut series = read_series_csv(open(CORPUS_FILES[2])?)?;
        let incidents: Vec<GroundTruthIncident> = read_jsonl(open(CORPUS_FILES[3])?)?;
        let mut links = Vec::with_capacity(infos.len());
        for info in infos {
            let mut take = |c: Channel| -> Result<RawSeries> {
                let k = series
                    .iter()
                    .position(|s| s.link_id == info.link_id && s.channel == c)
                    .ok_or_else(|| Error::Domain(format!("link {} has no {} series", info.link_id, c.as_str())))?;
                Ok(series.swap_remove(k))
            };
            let s = [take(Channel::Speed)?, take(Channel::Flow)?, take(Channel::TravelTime)?];
            if s.iter().any(|r| r.values.len() != config.n_minutes()) {
                return domain(format!("link {} series length differs from the configured span", info.link_id));
            }
            let incs = incidents.iter().filter(|i| i.link_id == info.link_id).cloned().collect();
            links.push(LinkData { info, series: s, incidents: incs });
        }
        Ok(Self { config, links })
    }
}
