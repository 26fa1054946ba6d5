//! Landmark models: one Cox or forest fit per (landmark time, horizon) on
//! the incidents still active at the landmark, administratively censored at
//! the horizon.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curve::SurvivalCurve;
use crate::dataset::IncidentRecord;
use crate::error::{domain, Error, Result};
use crate::features::{DynamicSnapshot, IncidentTrace, Schema};
use crate::grid::TimeGrid;
use crate::par;
use crate::rsf::{grow_forest, Forest, ForestParams};
use crate::survclassic::{cox_fit_dropping, CoxModel, CoxOptions, SurvData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkConfig {
    pub landmark_times: Vec<usize>,
    pub horizons: Vec<usize>,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        Self { landmark_times: vec![0, 15, 30, 45, 60, 120], horizons: vec![5, 15, 30, 45, 60, 120, 180, 240] }
    }
}

impl LandmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let increasing = |v: &[usize]| !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.landmark_times) || !increasing(&self.horizons) || self.horizons[0] == 0 {
            return domain("landmark times and horizons must be non-empty and strictly increasing, horizons positive");
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.landmark_times
            .iter()
            .flat_map(|&l| self.horizons.iter().map(move |&h| (l, h)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cox,
    Rsf,
}

impl ModelKind {
    /// Cox fits use reference coding, forests the full one-hot encoding.
    pub fn reference_coded(self) -> bool {
        self == ModelKind::Cox
    }
}

/// Static covariates followed by residual levels and gradients at `t`.
pub fn landmark_covariates(
    schema: &Schema,
    reference: bool,
    covariates: &crate::datagen::Covariates,
    trace: &IncidentTrace,
    t: usize,
) -> Result<Vec<f64>> {
    let mut x = if reference { schema.encode_design(covariates)? } else { schema.encode(covariates)? };
    x.extend(trace.snapshot(t)?.to_vec());
    Ok(x)
}

pub fn landmark_names(schema: &Schema, reference: bool) -> Vec<String> {
    let mut names = if reference { schema.design_names() } else { schema.column_names() };
    names.extend(DynamicSnapshot::NAMES.iter().map(|s| s.to_string()));
    names
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkDataset {
    pub landmark: usize,
    pub horizon: usize,
    pub ids: Vec<u64>,
    pub data: SurvData,
}

impl LandmarkDataset {
    pub fn n_admin_censored(&self, records: &[&IncidentRecord]) -> usize {
        let limit = (self.landmark + self.horizon) as f64;
        records.iter().filter(|r| r.active_at(self.landmark as f64) && r.duration > limit).count()
    }
}

/// Incidents active at `landmark`, times measured from it and censored at
/// `landmark + horizon`.
pub fn slice(
    records: &[&IncidentRecord],
    schema: &Schema,
    reference: bool,
    landmark: usize,
    horizon: usize,
) -> Result<LandmarkDataset> {
    let lm = landmark as f64;
    let limit = (landmark + horizon) as f64;
    let mut ids = Vec::new();
    let mut x = Vec::new();
    let mut time = Vec::new();
    let mut event = Vec::new();
    for r in records.iter().filter(|r| r.active_at(lm)) {
        ids.push(r.id);
        x.push(landmark_covariates(schema, reference, &r.covariates, &r.trace, landmark)?);
        time.push(r.duration.min(limit) - lm);
        event.push(r.event && r.duration <= limit);
    }
    if ids.is_empty() {
        return Err(Error::Empty(format!("no incidents active at landmark {landmark}")));
    }
    Ok(LandmarkDataset { landmark, horizon, ids, data: SurvData::new(x, time, event)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellModel {
    Cox(CoxModel),
    Rsf(Forest),
}

impl CellModel {
    /// Curve over `[0, horizon]` relative to the prediction time.
    pub fn predict(&self, x: &[f64], grid: &TimeGrid) -> Result<SurvivalCurve> {
        match self {
            CellModel::Cox(m) => m.predict(x, grid),
            CellModel::Rsf(f) => f.predict(x, grid),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub landmark: usize,
    pub horizon: usize,
    pub n_rows: usize,
    pub n_events: usize,
    pub model: Option<CellModel>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkFamily {
    pub kind: ModelKind,
    pub config: LandmarkConfig,
    pub schema: Schema,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, Default)]
pub struct FamilyOptions {
    pub cox: CoxOptions,
    pub forest: ForestParams,
}

/// Fit every cell independently; failed or empty cells are kept with their
/// error and skipped at prediction time.
pub fn fit_landmark_family(
    records: &[&IncidentRecord],
    schema: &Schema,
    config: &LandmarkConfig,
    kind: ModelKind,
    opts: &FamilyOptions,
) -> Result<LandmarkFamily> {
    config.validate()?;
    let cells = config.cells();
    let fitted = par::map_slice(&cells, |&(landmark, horizon)| {
        let mut cell = Cell { landmark, horizon, n_rows: 0, n_events: 0, model: None, error: None };
        let ds = match slice(records, schema, kind.reference_coded(), landmark, horizon) {
            Ok(ds) => ds,
            Err(e) => {
                cell.error = Some(e.to_string());
                return cell;
            }
        };
        cell.n_rows = ds.data.n();
        cell.n_events = ds.data.n_events();
        let model = match kind {
            ModelKind::Cox => cox_fit_dropping(&ds.data, &opts.cox).map(|(m, dropped)| {
                if !dropped.is_empty() {
                    log::info!("landmark cell ({landmark}, {horizon}): dropped diverging columns {dropped:?}");
                }
                CellModel::Cox(m)
            }),
            ModelKind::Rsf => {
                let params = ForestParams {
                    seed: crate::rng::mix(opts.forest.seed, &[landmark as u64, horizon as u64]),
                    ..opts.forest.clone()
                };
                grow_forest(&ds.data, &params).map(CellModel::Rsf)
            }
        };
        match model {
            Ok(m) => cell.model = Some(m),
            Err(e) => {
                log::warn!("landmark cell ({landmark}, {horizon}) not fitted: {e}");
                cell.error = Some(e.to_string());
            }
        }
        cell
    });
    Ok(LandmarkFamily { kind, config: config.clone(), schema: schema.clone(), cells: fitted })
}

impl LandmarkFamily {
    pub fn cell(&self, landmark: usize, horizon: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.landmark == landmark && c.horizon == horizon)
    }

    /// The fitted cell with the latest landmark not after `t`.
    pub fn cell_for(&self, t: f64, horizon: usize) -> Result<&Cell> {
        if !self.config.horizons.contains(&horizon) {
            return domain(format!("horizon {horizon} is not in the landmark configuration"));
        }
        if t < self.config.landmark_times[0] as f64 {
            return domain(format!("prediction time {t} precedes the first landmark"));
        }
        self.cells
            .iter()
            .filter(|c| c.horizon == horizon && c.landmark as f64 <= t && c.model.is_some())
            .max_by_key(|c| c.landmark)
            .ok_or_else(|| Error::Empty(format!("no fitted landmark model at or before {t} for horizon {horizon}")))
    }

    /// Curve over `[t, t + horizon]` for an incident still active at `t`,
    /// using its covariates at `t`.
    pub fn predict_at(&self, record: &IncidentRecord, t: usize, horizon: usize) -> Result<SurvivalCurve> {
        let cell = self.cell_for(t as f64, horizon)?;
        let x = landmark_covariates(&self.schema, self.kind.reference_coded(), &record.covariates, &record.trace, t)?;
        let grid = TimeGrid::new(t as f64, 1.0, horizon as f64)?;
        cell.model.as_ref().expect("cell_for returns fitted cells").predict(&x, &grid)
    }

    /// `manifest.json` plus one JSON artifact per fitted cell.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for c in &self.cells {
            let file = c.model.as_ref().map(|m| -> Result<String> {
                let name = format!("cell_{}_{}.json", c.landmark, c.horizon);
                std::fs::write(dir.join(&name), serde_json::to_vec(m)?)?;
                Ok(name)
            });
            entries.push(serde_json::json!({
                "landmark": c.landmark,
                "horizon": c.horizon,
                "n_rows": c.n_rows,
                "n_events": c.n_events,
                "artifact": file.transpose()?,
                "error": c.error,
            }));
        }
        let manifest = serde_json::json!({
            "kind": self.kind,
            "config": self.config,
            "schema": self.schema,
            "cells": entries,
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            landmark: usize,
            horizon: usize,
            n_rows: usize,
            n_events: usize,
            artifact: Option<String>,
            error: Option<String>,
        }
        #[derive(Deserialize)]
        struct Manifest {
            kind: ModelKind,
            config: LandmarkConfig,
            schema: Schema,
            cells: Vec<Entry>,
        }
        let m: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let cells = m
            .cells
            .into_iter()
            .map(|e| {
                let model = match &e.artifact {
                    Some(f) => Some(serde_json::from_slice(&std::fs::read(dir.join(f))?)?),
                    None => None,
                };
                Ok(Cell {
                    landmark: e.landmark,
                    horizon: e.horizon,
                    n_rows: e.n_rows,
                    n_events: e.n_events,
                    model,
                    error: e.error,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { kind: m.kind, config: m.config, schema: m.schema, cells })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::baseline::BaselineConfig;
    use crate::dataset::label_corpus;
    use crate::datagen::{generate_corpus, Preset, SyntheticConfig};

    fn corpus(seed: u64) -> (Vec<IncidentRecord>, Schema) {
        let cfg = SyntheticConfig { n_links: 10, weeks: 6, incident_rate: 4.0, seed, ..Default::default() };
        let lc = label_corpus(&generate_corpus(&cfg).unwrap(), &BaselineConfig::default()).unwrap();
        let covs: Vec<_> = lc.records.iter().map(|r| &r.covariates).collect();
        let schema = Schema::incident_covariates(&covs).unwrap();
        (lc.records, schema)
    }

    fn record(duration: f64, event: bool) -> IncidentRecord {
        let (mut recs, _) = corpus(1);
        let mut r = recs.swap_remove(0);
        r.duration = duration;
        r.event = event;
        let n = r.trace.pre + duration as usize + 2;
        for c in r.trace.channels.iter_mut() {
            c.resize(n, 0.0);
        }
        r
    }

    #[test]
    fn censoring_rule_examples() {
        let (_, schema) = corpus(1);
        let a = record(200.0, true);
        let d = slice(&[&a], &schema, true, 60, 120).unwrap();
        assert_eq!((d.data.time[0], d.data.event[0]), (120.0, false));
        let b = record(90.0, true);
        let d = slice(&[&b], &schema, true, 60, 120).unwrap();
        assert_eq!((d.data.time[0], d.data.event[0]), (30.0, true));
        let c = record(50.0, true);
        assert!(matches!(slice(&[&c], &schema, true, 60, 120), Err(Error::Empty(_))));
    }

    #[test]
    fn slices_match_brute_force_filter() {
        let (records, schema) = corpus(2);
        let refs: Vec<&IncidentRecord> = records.iter().collect();
        let cfg = LandmarkConfig::default();
        for &h in &cfg.horizons {
            let mut prev = usize::MAX;
            for &l in &cfg.landmark_times {
                let Ok(d) = slice(&refs, &schema, false, l, h) else { continue };
                let survivors: Vec<_> = records.iter().filter(|r| r.duration > l as f64).collect();
                assert_eq!(d.data.n(), survivors.len());
                assert!(d.data.n() <= prev);
                prev = d.data.n();
                let censored = d.data.event.iter().filter(|e| !**e).count();
                let past = survivors.iter().filter(|r| r.duration > (l + h) as f64).count();
                let orig = survivors.iter().filter(|r| !r.event && r.duration <= (l + h) as f64).count();
                assert_eq!(censored, past + orig);
                assert_eq!(d.n_admin_censored(&refs), past);
                assert!(d.data.time.iter().all(|t| *t > 0.0));
            }
        }
        let all = slice(&refs, &schema, false, 0, 240).unwrap();
        let mut ids = all.ids.clone();
        ids.sort_unstable();
        let mut expect: Vec<u64> = records.iter().map(|r| r.id).collect();
        expect.sort_unstable();
        assert_eq!(ids, expect);
    }

    #[test]
    fn first_cell_matches_direct_cox_fit() {
        let cfg = SyntheticConfig { n_links: 20, weeks: 10, incident_rate: 5.0, seed: 4, ..SyntheticConfig::preset(Preset::Linear) };
        let lc = label_corpus(&generate_corpus(&cfg).unwrap(), &BaselineConfig::default()).unwrap();
        let covs: Vec<_> = lc.records.iter().map(|r| &r.covariates).collect();
        let schema = Schema::incident_covariates(&covs).unwrap().restricted(&["time_of_day", "weekend"]);
        let refs: Vec<&IncidentRecord> = lc.records.iter().collect();
        let lcfg = LandmarkConfig { landmark_times: vec![0, 60], horizons: vec![240] };
        let fam = fit_landmark_family(&refs, &schema, &lcfg, ModelKind::Cox, &FamilyOptions::default()).unwrap();
        let CellModel::Cox(m) = fam.cell(0, 240).unwrap().model.as_ref().unwrap() else { panic!() };

        let x: Vec<Vec<f64>> = refs
            .iter()
            .map(|r| landmark_covariates(&schema, true, &r.covariates, &r.trace, 0).unwrap())
            .collect();
        let direct = SurvData::new(x, refs.iter().map(|r| r.duration).collect(), refs.iter().map(|r| r.event).collect()).unwrap();
        let full = crate::survclassic::cox_fit(&direct, &CoxOptions::default()).unwrap();
        for (a, b) in m.beta.iter().zip(&full.beta) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn dispatch_floors_to_fitted_landmark() {
        let (records, schema) = corpus(3);
        let schema = schema.restricted(&["time_of_day"]);
        let refs: Vec<&IncidentRecord> = records.iter().collect();
        let cfg = LandmarkConfig { landmark_times: vec![0, 45, 60], horizons: vec![30] };
        let fam = fit_landmark_family(&refs, &schema, &cfg, ModelKind::Cox, &FamilyOptions::default()).unwrap();
        assert_eq!(fam.cells.len(), 3);
        assert_eq!(fam.cell_for(50.0, 30).unwrap().landmark, 45);
        assert_eq!(fam.cell_for(60.0, 30).unwrap().landmark, 60);
        assert!(fam.cell_for(10.0, 45).is_err());
        let r = records.iter().find(|r| r.duration > 55.0).unwrap();
        let c = fam.predict_at(r, 50, 30).unwrap();
        assert_eq!(c.grid().origin(), 50.0);
        assert!((c.pmf().iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let dir = tempfile::tempdir().unwrap();
        fam.save(dir.path()).unwrap();
        assert_eq!(LandmarkFamily::load(dir.path()).unwrap(), fam);
    }

    fn base() -> &'static (IncidentRecord, Schema) {
        static BASE: std::sync::OnceLock<(IncidentRecord, Schema)> = std::sync::OnceLock::new();
        BASE.get_or_init(|| {
            let (mut recs, schema) = corpus(1);
            (recs.swap_remove(0), schema)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn slices_censor_by_the_filter_rule(
            rows in proptest::collection::vec((1u32..400, proptest::bool::weighted(0.8)), 1..60),
            horizon in 1usize..250,
        ) {
            let (proto, schema) = base();
            let records: Vec<IncidentRecord> = rows
                .iter()
                .enumerate()
                .map(|(k, &(d, e))| {
                    let mut r = proto.clone();
                    r.id = k as u64;
                    r.duration = d as f64;
                    r.event = e;
                    let n = r.trace.pre + d as usize + 2;
                    for c in r.trace.channels.iter_mut() {
                        c.resize(n, 0.0);
                    }
                    r
                })
                .collect();
            let refs: Vec<&IncidentRecord> = records.iter().collect();
            let mut prev = usize::MAX;
            for l in [0usize, 15, 30, 45, 60, 120] {
                let active = records.iter().filter(|r| r.duration > l as f64).count();
                let Ok(d) = slice(&refs, schema, false, l, horizon) else {
                    prop_assert_eq!(active, 0);
                    prev = 0;
                    continue;
                };
                prop_assert_eq!(d.data.n(), active);
                prop_assert!(d.data.n() <= prev);
                prev = d.data.n();
                let limit = (l + horizon) as f64;
                let past = records.iter().filter(|r| r.duration > limit).count();
                let orig = records.iter().filter(|r| r.duration > l as f64 && !r.event && r.duration <= limit).count();
                prop_assert_eq!(d.data.event.iter().filter(|e| !**e).count(), past + orig);
                prop_assert!(d.data.time.iter().all(|t| *t > 0.0 && *t <= horizon as f64));
            }
        }
    }
}
