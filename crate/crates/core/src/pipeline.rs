//! End-to-end run over a stored corpus: label, split, fit every model
//! family, evaluate on the test split and attribute the sliding-window
//! network.
//!
//! Each stage writes its artifacts and a `manifest.json` into its own
//! directory under the work directory. A stage whose manifest digest
//! matches the digest of its configuration and upstream stages is loaded
//! from disk instead of recomputed.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{write_profiles_csv, BaselineConfig};
use crate::curve::SurvivalCurve;
use crate::datagen::{read_jsonl, write_jsonl, Corpus, CORPUS_FILES};
use crate::dataset::{label_corpus, IncidentRecord};
use crate::error::{domain, Error, Result};
use crate::eval::{ape_per_minute, evaluate_dynamic, evaluate_static, record_mape, ApePoint, EvaluationReport, Metric};
use crate::explain::{self, explain_queries, flat_players, grouped_players, Method, Player};
use crate::features::{ChannelStats, ResidualWindow, Schema};
use crate::grid::TimeGrid;
use crate::hitnet::train::{dynamic_input, dynamic_samples, random_search, static_samples, HeadKind, Sample, SearchSpace, TrainConfig, TrialData};
use crate::hitnet::{HitNet, Mode, NetInput};
use crate::landmark::{fit_landmark_family, FamilyOptions, LandmarkConfig, LandmarkFamily, ModelKind};
use crate::par;
use crate::rng::mix;
use crate::rsf::{grow_forest, Forest, ForestParams};
use crate::survclassic::{aft_fit, backward_eliminate, cox_fit_dropping, AftKind, AftModel, AicRow, CoxModel, CoxOptions, SurvData};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub holdout: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.48, holdout: 0.21 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NnConfig {
    /// Random-search trials per (mode, head).
    pub trials: usize,
    pub heads: Vec<HeadKind>,
    pub train: TrainConfig,
    /// Minutes between training prediction times of dynamic samples.
    pub sample_every: usize,
    /// Also fit the raw level+gradient network for comparison.
    pub ablation: bool,
    /// Overrides applied to every search space.
    pub windows: Option<Vec<usize>>,
    pub neurons: Option<Vec<usize>>,
    pub dense_layers: Option<Vec<usize>>,
    pub learning_rates: Option<Vec<f64>>,
}

impl Default for NnConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            heads: vec![HeadKind::Mixture, HeadKind::Nonparametric, HeadKind::Kernel],
            train: TrainConfig::default(),
            sample_every: 5,
            ablation: true,
            windows: None,
            neurons: None,
            dense_layers: None,
            learning_rates: None,
        }
    }
}

impl NnConfig {
    fn space(&self, mode: Mode, head: HeadKind) -> SearchSpace {
        let mut s = SearchSpace::table(mode).with_head(head);
        if let Some(v) = &self.windows {
            s.windows = v.clone();
        }
        if let Some(v) = &self.neurons {
            s.neurons = v.clone();
        }
        if let Some(v) = &self.dense_layers {
            s.dense_layers = v.clone();
        }
        if let Some(v) = &self.learning_rates {
            s.learning_rates = v.clone();
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub enabled: bool,
    pub queries: usize,
    pub background: usize,
    pub permutations: usize,
    /// Background rows averaged along each sampled ordering.
    pub draws: usize,
    /// Toggle one-hot fields and residual channels as units.
    pub grouped: bool,
    /// Horizons (minutes ahead) whose predicted end probability is explained.
    pub horizons: Vec<usize>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            queries: 1000,
            background: 10000,
            permutations: 10,
            draws: 16,
            grouped: true,
            horizons: vec![5, 15, 30, 45, 60, 120, 180, 240],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub baseline: BaselineConfig,
    pub split: SplitConfig,
    pub landmark: LandmarkConfig,
    pub eval_times: Vec<usize>,
    pub horizons: Vec<usize>,
    pub percentiles: Vec<f64>,
    pub ape_from: f64,
    pub ape_step: f64,
    pub cox: CoxOptions,
    /// Backward elimination of covariate groups by AICc for Cox and AFT.
    pub aic_selection: bool,
    pub forest: ForestParams,
    pub nn: NnConfig,
    pub explain: ExplainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let landmark = LandmarkConfig::default();
        Self {
            seed: 7,
            baseline: BaselineConfig::default(),
            split: SplitConfig::default(),
            eval_times: landmark.landmark_times.clone(),
            horizons: landmark.horizons.clone(),
            landmark,
            percentiles: vec![30.0, 50.0, 70.0, 90.0],
            ape_from: 30.0,
            ape_step: 5.0,
            cox: CoxOptions::default(),
            aic_selection: true,
            forest: ForestParams::default(),
            nn: NnConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.split;
        if !(s.train > 0.0 && s.holdout > 0.0 && s.train + s.holdout < 1.0) {
            return domain("split fractions must be positive and leave room for a test part");
        }
        self.landmark.validate()?;
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return domain("horizons must be non-empty and positive");
        }
        if self.nn.heads.is_empty() || self.nn.trials == 0 {
            return domain("at least one network head and one trial are required");
        }
        if self.explain.enabled && (self.explain.permutations < 2 || self.explain.draws == 0 || self.explain.horizons.is_empty()) {
            return domain("explanations need at least two permutations and one horizon");
        }
        if !(self.ape_step > 0.0) {
            return domain("ape_step must be positive");
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Label,
    Split,
    FitStatic,
    FitDynamic,
    Evaluate,
    Explain,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Label, Stage::Split, Stage::FitStatic, Stage::FitDynamic, Stage::Evaluate, Stage::Explain];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Label => "label",
            Stage::Split => "split",
            Stage::FitStatic => "fit-static",
            Stage::FitDynamic => "fit-dynamic",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub digest: String,
    pub version: String,
    pub seconds: f64,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: PipelineConfig,
    pub corpus: PathBuf,
    /// File name and SHA-256 of every corpus input.
    pub inputs: Vec<(String, String)>,
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn chain_digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(std::fs::File::create(path)?), value)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
}

/// Load a stage from disk when its manifest digest matches, otherwise run it
/// and record the manifest last.
fn cached<T>(
    work: &Path,
    stage: Stage,
    digest: &str,
    config: serde_json::Value,
    log: &mut Vec<(Stage, bool)>,
    compute: impl FnOnce(&Path) -> Result<T>,
    load: impl FnOnce(&Path) -> Result<T>,
) -> Result<T> {
    let dir = work.join(stage.name());
    let manifest = dir.join("manifest.json");
    let wrap = |e: Error| Error::Stage { stage: stage.name().into(), source: Box::new(e) };
    if let Ok(m) = read_json::<StageManifest>(&manifest) {
        if m.digest == digest && m.version == VERSION {
            match load(&dir) {
                Ok(v) => {
                    log::info!("stage {}: cached", stage.name());
                    log.push((stage, true));
                    return Ok(v);
                }
                Err(e) => log::warn!("stage {}: cache unreadable ({e}); recomputing", stage.name()),
            }
        }
    }
    std::fs::create_dir_all(&dir).map_err(|e| wrap(e.into()))?;
    if manifest.exists() {
        std::fs::remove_file(&manifest).map_err(|e| wrap(e.into()))?;
    }
    log::info!("stage {}: running", stage.name());
    let start = Instant::now();
    let value = compute(&dir).map_err(wrap)?;
    let m = StageManifest {
        stage,
        digest: digest.to_string(),
        version: VERSION.to_string(),
        seconds: start.elapsed().as_secs_f64(),
        config,
    };
    write_json(&manifest, &m).map_err(wrap)?;
    log.push((stage, false));
    Ok(value)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub holdout: Vec<u64>,
    pub test: Vec<u64>,
}

/// Assign records to train/holdout/test by a seeded hash of their id,
/// separately within each duration quartile.
pub fn split_records(records: &[IncidentRecord], cfg: &SplitConfig, seed: u64) -> Split {
    let mut sorted: Vec<f64> = records.iter().map(|r| r.duration).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let cuts: Vec<f64> = if n == 0 { Vec::new() } else { (1..4).map(|q| sorted[(q * n / 4).min(n - 1)]).collect() };
    let mut strata: Vec<Vec<(u64, u64)>> = vec![Vec::new(); 4];
    for r in records {
        let q = cuts.iter().filter(|&&c| r.duration >= c).count();
        strata[q].push((mix(seed, &[r.id]), r.id));
    }
    let mut out = Split::default();
    for mut s in strata {
        s.sort_unstable();
        let m = s.len() as f64;
        let a = (m * cfg.train).round() as usize;
        let b = (m * (cfg.train + cfg.holdout)).round() as usize;
        for (k, (_, id)) in s.into_iter().enumerate() {
            match k {
                k if k < a => out.train.push(id),
                k if k < b => out.holdout.push(id),
                _ => out.test.push(id),
            }
        }
    }
    out.train.sort_unstable();
    out.holdout.sort_unstable();
    out.test.sort_unstable();
    out
}

fn pick<'a>(records: &'a [IncidentRecord], ids: &[u64]) -> Vec<&'a IncidentRecord> {
    let by_id: HashMap<u64, &IncidentRecord> = records.iter().map(|r| (r.id, r)).collect();
    ids.iter().filter_map(|id| by_id.get(id).copied()).collect()
}

/// Classical model restricted to selected design columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected<M> {
    pub columns: Vec<usize>,
    pub model: M,
}

fn select(x: &[f64], cols: &[usize]) -> Vec<f64> {
    cols.iter().map(|&c| x[c]).collect()
}

pub struct StaticModels {
    pub schema: Schema,
    pub cox: Selected<CoxModel>,
    pub aft_ln: Selected<AftModel>,
    pub aft_w: Selected<AftModel>,
    pub rsf: Forest,
    pub nets: Vec<(HeadKind, HitNet)>,
}

pub struct DynamicModels {
    pub channel_stats: ChannelStats,
    pub landmark_cox: LandmarkFamily,
    pub landmark_rsf: LandmarkFamily,
    pub sliding: Vec<(HeadKind, HitNet)>,
    pub raw: Vec<(HeadKind, HitNet)>,
}

pub fn head_name(h: HeadKind) -> &'static str {
    match h {
        HeadKind::Nonparametric => "nonparametric",
        HeadKind::Mixture => "mixture",
        HeadKind::Kernel => "kernel",
    }
}

/// Report name of each fitted model.
pub fn static_net_name(h: HeadKind) -> String {
    format!("nn-static-{}", head_name(h))
}

pub fn sliding_name(h: HeadKind) -> String {
    format!("sliding-{}", head_name(h))
}

pub fn raw_dynamic_name(h: HeadKind) -> String {
    format!("raw-dynamic-{}", head_name(h))
}

/// Each dynamic model paired with the static model it refines.
pub fn dynamic_static_pairs(heads: &[HeadKind]) -> Vec<(String, String)> {
    let mut v = vec![("landmark-cox".to_string(), "cox".to_string()), ("landmark-rsf".into(), "rsf".into())];
    v.extend(heads.iter().map(|&h| (sliding_name(h), static_net_name(h))));
    v
}

fn surv_data(rows: Vec<Vec<f64>>, records: &[&IncidentRecord]) -> Result<SurvData> {
    SurvData::new(rows, records.iter().map(|r| r.duration).collect(), records.iter().map(|r| r.event).collect())
}

fn select_groups<F>(groups: &[(String, std::ops::Range<usize>)], n: usize, enabled: bool, fit: F) -> Result<(Vec<usize>, Vec<AicRow>)>
where
    F: FnMut(&[usize]) -> Result<(f64, usize)>,
{
    let g: Vec<(String, Vec<usize>)> = groups.iter().map(|(n, r)| (n.clone(), r.clone().collect())).collect();
    let all: Vec<usize> = g.iter().flat_map(|x| x.1.iter().copied()).collect();
    if !enabled {
        return Ok((all, Vec::new()));
    }
    let (keep, rows) = backward_eliminate(&g, n, fit)?;
    let mut cols: Vec<usize> = keep.iter().flat_map(|&k| g[k].1.iter().copied()).collect();
    cols.sort_unstable();
    Ok((cols, rows))
}

fn write_aic(path: &Path, rows: &[(String, AicRow)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "candidate", "loglik", "k", "n", "aicc"])?;
    for (m, r) in rows {
        w.write_record([m.clone(), r.name.clone(), r.loglik.to_string(), r.k.to_string(), r.n.to_string(), r.aicc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn search_net(
    cfg: &PipelineConfig,
    mode: Mode,
    head: HeadKind,
    seed: u64,
    data: impl Fn(&crate::hitnet::NetSpec) -> Result<TrialData> + Sync,
    dir: &Path,
    name: &str,
) -> Result<HitNet> {
    let tc = TrainConfig { seed, ..cfg.nn.train.clone() };
    let out = random_search(&cfg.nn.space(mode, head), cfg.nn.trials, &tc, data)?;
    out.best.save(&dir.join(name))?;
    out.history.write_csv(&dir.join(format!("{name}-history.csv")))?;
    write_json(&dir.join(format!("{name}-leaderboard.json")), &out.leaderboard)?;
    log::info!("{name}: best holdout loss {:.4} over {} specs", out.history.best_holdout(), out.leaderboard.len());
    Ok(out.best)
}

fn fit_static(cfg: &PipelineConfig, records: &[IncidentRecord], split: &Split, dir: &Path) -> Result<StaticModels> {
    let train = pick(records, &split.train);
    let holdout = pick(records, &split.holdout);
    let fit_set: Vec<&IncidentRecord> = train.iter().chain(&holdout).copied().collect();
    if train.is_empty() || holdout.is_empty() {
        return Err(Error::Empty("train or holdout split".into()));
    }
    let schema = Schema::incident_covariates(&train.iter().map(|r| &r.covariates).collect::<Vec<_>>())?;
    write_json(&dir.join("schema.json"), &schema)?;

    let design = surv_data(fit_set.iter().map(|r| schema.encode_design(&r.covariates)).collect::<Result<_>>()?, &fit_set)?;
    let full = surv_data(fit_set.iter().map(|r| schema.encode(&r.covariates)).collect::<Result<_>>()?, &fit_set)?;
    let n = design.n();
    let groups = schema.design_groups();
    let mut aic = Vec::new();

    let (cols, rows) = select_groups(&groups, n, cfg.aic_selection, |c| {
        let (m, _) = cox_fit_dropping(&design.select_columns(c), &cfg.cox)?;
        Ok((m.loglik, m.n_free))
    })?;
    aic.extend(rows.into_iter().map(|r| ("cox".to_string(), r)));
    let (model, dropped) = cox_fit_dropping(&design.select_columns(&cols), &cfg.cox)?;
    if !dropped.is_empty() {
        log::info!("cox: dropped diverging columns {dropped:?}");
    }
    let cox = Selected { model, columns: cols };
    write_json(&dir.join("cox.json"), &cox)?;

    let mut afts = Vec::new();
    for (kind, name) in [(AftKind::LogNormal, "aft-ln"), (AftKind::Weibull, "aft-w")] {
        let (cols, rows) = select_groups(&groups, n, cfg.aic_selection, |c| {
            let m = aft_fit(&design.select_columns(c), kind)?;
            Ok((m.loglik, m.n_params()))
        })?;
        aic.extend(rows.into_iter().map(|r| (name.to_string(), r)));
        let m = Selected { model: aft_fit(&design.select_columns(&cols), kind)?, columns: cols };
        write_json(&dir.join(format!("{name}.json")), &m)?;
        afts.push(m);
    }
    write_aic(&dir.join("aic.csv"), &aic)?;

    let rsf = grow_forest(&full, &ForestParams { seed: mix(cfg.seed, &[0xf0]), ..cfg.forest.clone() })?;
    write_json(&dir.join("rsf.json"), &rsf)?;
    if let Some(c) = rsf.oob_cindex(&full) {
        log::info!("rsf: OOB C-index {c:.4}");
    }

    let train_s = static_samples(&train, &schema)?;
    let hold_s = static_samples(&holdout, &schema)?;
    let max_dur = train.iter().map(|r| r.duration).fold(1.0, f64::max);
    let mut nets = Vec::new();
    for (k, &h) in cfg.nn.heads.iter().enumerate() {
        let net = search_net(
            cfg,
            Mode::Static,
            h,
            mix(cfg.seed, &[0x51, k as u64]),
            |spec| {
                Ok(TrialData {
                    static_width: schema.width(),
                    grid: TimeGrid::for_max_duration(max_dur, spec.resolution())?,
                    channel_stats: ChannelStats::default(),
                    schema_digest: schema.digest(),
                    train: train_s.clone(),
                    holdout: hold_s.clone(),
                })
            },
            dir,
            &static_net_name(h),
        )?;
        nets.push((h, net));
    }
    let aft_w = afts.pop().expect("two AFT fits");
    let aft_ln = afts.pop().expect("two AFT fits");
    Ok(StaticModels { schema, cox, aft_ln, aft_w, rsf, nets })
}

fn load_static(cfg: &PipelineConfig, dir: &Path) -> Result<StaticModels> {
    Ok(StaticModels {
        schema: read_json(&dir.join("schema.json"))?,
        cox: read_json(&dir.join("cox.json"))?,
        aft_ln: read_json(&dir.join("aft-ln.json"))?,
        aft_w: read_json(&dir.join("aft-w.json"))?,
        rsf: read_json(&dir.join("rsf.json"))?,
        nets: cfg
            .nn
            .heads
            .iter()
            .map(|&h| Ok((h, HitNet::load(&dir.join(static_net_name(h)))?)))
            .collect::<Result<_>>()?,
    })
}

fn fit_dynamic(cfg: &PipelineConfig, records: &[IncidentRecord], split: &Split, schema: &Schema, dir: &Path) -> Result<DynamicModels> {
    let train = pick(records, &split.train);
    let holdout = pick(records, &split.holdout);
    let fit_set: Vec<&IncidentRecord> = train.iter().chain(&holdout).copied().collect();
    let stats = ChannelStats::from_samples(train.iter().map(|r| r.trace.history(r.trace.span(), 0)));
    write_json(&dir.join("channel-stats.json"), &stats)?;

    let opts = FamilyOptions { cox: cfg.cox.clone(), forest: ForestParams { seed: mix(cfg.seed, &[0x1a]), ..cfg.forest.clone() } };
    let landmark_cox = fit_landmark_family(&fit_set, schema, &cfg.landmark, ModelKind::Cox, &opts)?;
    landmark_cox.save(&dir.join("landmark-cox"))?;
    let landmark_rsf = fit_landmark_family(&fit_set, schema, &cfg.landmark, ModelKind::Rsf, &opts)?;
    landmark_rsf.save(&dir.join("landmark-rsf"))?;

    let max_dur = train.iter().map(|r| r.duration).fold(1.0, f64::max);
    let every = cfg.nn.sample_every;
    let mut modes = vec![Mode::Sliding];
    if cfg.nn.ablation {
        modes.push(Mode::RawDynamic);
    }
    let mut sliding = Vec::new();
    let mut raw = Vec::new();
    for mode in modes {
        let windows = cfg.nn.space(mode, cfg.nn.heads[0]).windows;
        let windows: Vec<usize> = if mode == Mode::Sliding { windows } else { vec![windows[0]] };
        let mut cache: Vec<(usize, Vec<Sample>, Vec<Sample>)> = Vec::new();
        for &w in &windows {
            cache.push((
                w,
                dynamic_samples(&train, schema, mode, w, every, &stats)?,
                dynamic_samples(&holdout, schema, mode, w, every, &stats)?,
            ));
        }
        for (k, &h) in cfg.nn.heads.iter().enumerate() {
            let name = if mode == Mode::Sliding { sliding_name(h) } else { raw_dynamic_name(h) };
            let net = search_net(
                cfg,
                mode,
                h,
                mix(cfg.seed, &[0xd1, mode as u64, k as u64]),
                |spec| {
                    let (_, tr, ho) = cache
                        .iter()
                        .find(|c| mode != Mode::Sliding || c.0 == spec.window)
                        .ok_or_else(|| Error::Domain(format!("no samples for window {}", spec.window)))?;
                    Ok(TrialData {
                        static_width: schema.width(),
                        grid: TimeGrid::for_max_duration(max_dur, spec.resolution())?,
                        channel_stats: stats.clone(),
                        schema_digest: schema.digest(),
                        train: tr.clone(),
                        holdout: ho.clone(),
                    })
                },
                dir,
                &name,
            )?;
            if mode == Mode::Sliding {
                sliding.push((h, net));
            } else {
                raw.push((h, net));
            }
        }
    }
    Ok(DynamicModels { channel_stats: stats, landmark_cox, landmark_rsf, sliding, raw })
}

fn load_dynamic(cfg: &PipelineConfig, dir: &Path) -> Result<DynamicModels> {
    let load = |name: String| HitNet::load(&dir.join(name));
    Ok(DynamicModels {
        channel_stats: read_json(&dir.join("channel-stats.json"))?,
        landmark_cox: LandmarkFamily::load(&dir.join("landmark-cox"))?,
        landmark_rsf: LandmarkFamily::load(&dir.join("landmark-rsf"))?,
        sliding: cfg.nn.heads.iter().map(|&h| Ok((h, load(sliding_name(h))?))).collect::<Result<_>>()?,
        raw: if cfg.nn.ablation {
            cfg.nn.heads.iter().map(|&h| Ok((h, load(raw_dynamic_name(h))?))).collect::<Result<_>>()?
        } else {
            Vec::new()
        },
    })
}

/// Remaining-time curve of a dynamic network at `t`, placed on absolute time.
pub fn net_curve_at(net: &HitNet, schema: &Schema, record: &IncidentRecord, t: usize) -> Result<SurvivalCurve> {
    let input = net_input(net, schema, record, t)?;
    let c = net.forward(&input)?;
    SurvivalCurve::new(c.grid().rebased(t as f64), c.pmf().to_vec())
}

fn net_input(net: &HitNet, schema: &Schema, record: &IncidentRecord, t: usize) -> Result<NetInput> {
    dynamic_input(net.spec.mode, net.spec.window, &net.channel_stats, schema.encode(&record.covariates)?, &record.trace, t)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub ape: Vec<(String, Vec<ApePoint>)>,
}

fn evaluate(cfg: &PipelineConfig, records: &[IncidentRecord], split: &Split, st: &StaticModels, dy: &DynamicModels, dir: &Path) -> Result<Evaluation> {
    let test = pick(records, &split.test);
    if test.is_empty() {
        return Err(Error::Empty("test split".into()));
    }
    let d: Vec<f64> = test.iter().map(|r| r.duration).collect();
    let e: Vec<bool> = test.iter().map(|r| r.event).collect();
    let horizons: Vec<f64> = cfg.horizons.iter().map(|&h| h as f64).collect();
    let times: Vec<f64> = cfg.eval_times.iter().map(|&t| t as f64).collect();
    let max_all = records.iter().map(|r| r.duration).fold(1.0, f64::max);
    let grid = TimeGrid::for_max_duration(max_all, 1.0)?;
    let schema = &st.schema;
    let mut report = EvaluationReport::default();

    let design: Vec<Vec<f64>> = test.iter().map(|r| schema.encode_design(&r.covariates)).collect::<Result<_>>()?;
    let full: Vec<Vec<f64>> = test.iter().map(|r| schema.encode(&r.covariates)).collect::<Result<_>>()?;
    let collect = |v: Vec<Result<SurvivalCurve>>| v.into_iter().collect::<Result<Vec<_>>>();
    let static_curves: Vec<(String, Vec<SurvivalCurve>)> = vec![
        ("cox".into(), collect(par::map_slice(&design, |x| st.cox.model.predict(&select(x, &st.cox.columns), &grid)))?),
        ("aft-ln".into(), collect(par::map_slice(&design, |x| st.aft_ln.model.predict(&select(x, &st.aft_ln.columns), &grid)))?),
        ("aft-w".into(), collect(par::map_slice(&design, |x| st.aft_w.model.predict(&select(x, &st.aft_w.columns), &grid)))?),
        ("rsf".into(), collect(par::map_slice(&full, |x| st.rsf.predict(x, &grid)))?),
    ];
    for (name, curves) in &static_curves {
        evaluate_static(&mut report, name, curves, &d, &e, &horizons)?;
    }
    for (h, net) in &st.nets {
        let inputs: Vec<NetInput> = full.iter().map(|x| NetInput::fixed(x.clone())).collect();
        let curves = net.forward_batch(&inputs.iter().collect::<Vec<_>>())?;
        evaluate_static(&mut report, &static_net_name(*h), &curves, &d, &e, &horizons)?;
    }

    let max_h = *cfg.landmark.horizons.last().expect("validated non-empty");
    let mut ape = Vec::new();
    for fam in [&dy.landmark_cox, &dy.landmark_rsf] {
        let name = match fam.kind {
            ModelKind::Cox => "landmark-cox",
            ModelKind::Rsf => "landmark-rsf",
        };
        evaluate_dynamic(&mut report, name, &d, &e, &times, &horizons, |ids, t, h| {
            par::map_slice(ids, |&i| fam.predict_at(test[i], t as usize, h as usize).map(|c| c.cdf(t + h))).into_iter().collect()
        })?;
        let predict = |i: usize, t: f64| fam.predict_at(test[i], t as usize, max_h);
        record_mape(&mut report, name, &d, &e, &cfg.percentiles, predict)?;
        ape.push((name.to_string(), ape_per_minute(&d, &e, cfg.ape_from, cfg.ape_step, predict)?));
    }
    let nets: Vec<(String, &HitNet)> = dy
        .sliding
        .iter()
        .map(|(h, n)| (sliding_name(*h), n))
        .chain(dy.raw.iter().map(|(h, n)| (raw_dynamic_name(*h), n)))
        .collect();
    for (name, net) in nets {
        let cache: RefCell<Option<(f64, Vec<SurvivalCurve>)>> = RefCell::new(None);
        evaluate_dynamic(&mut report, &name, &d, &e, &times, &horizons, |ids, t, h| {
            let mut slot = cache.borrow_mut();
            if slot.as_ref().is_none_or(|c| c.0 != t) {
                let inputs = ids.iter().map(|&i| net_input(net, schema, test[i], t as usize)).collect::<Result<Vec<_>>>()?;
                *slot = Some((t, net.forward_batch(&inputs.iter().collect::<Vec<_>>())?));
            }
            Ok(slot.as_ref().expect("filled above").1.iter().map(|c| c.cdf(h)).collect())
        })?;
        let predict = |i: usize, t: f64| net_curve_at(net, schema, test[i], t as usize);
        record_mape(&mut report, &name, &d, &e, &cfg.percentiles, predict)?;
        ape.push((name.clone(), ape_per_minute(&d, &e, cfg.ape_from, cfg.ape_step, predict)?));
    }

    let out = Evaluation { report, ape };
    write_evaluation(cfg, &out, dir)?;
    Ok(out)
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn write_evaluation(cfg: &PipelineConfig, ev: &Evaluation, dir: &Path) -> Result<()> {
    let r = &ev.report;
    r.write_csv(&dir.join("report.csv"))?;
    r.write_json(&dir.join("report.json"))?;
    write_json(&dir.join("ape.json"), &ev.ape)?;

    let tables = dir.join("tables");
    std::fs::create_dir_all(&tables)?;
    let models = r.models();
    for m in &models {
        for metric in [Metric::Cindex, Metric::Brier, Metric::Auroc] {
            if r.entries.iter().any(|e| &e.model == m && e.metric == metric && e.t > 0.0) {
                r.write_table_csv(m, metric, &tables.join(format!("{m}-{}.csv", metric.name())))?;
            }
        }
    }

    let mut w = csv::Writer::from_path(dir.join("static.csv"))?;
    let mut header = vec!["model".to_string(), "cindex".into(), "mape".into()];
    header.extend(cfg.horizons.iter().map(|h| format!("brier_{h}")));
    header.push("brier_mean".into());
    w.write_record(&header)?;
    for m in &models {
        let Some(c) = r.find(m, Metric::Cindex, 0.0, None, None) else { continue };
        let mut rec = vec![m.clone(), fmt(c.value), fmt(r.find(m, Metric::Mape, 0.0, None, Some(0.0)).and_then(|e| e.value))];
        let t = r.table(m, Metric::Brier);
        rec.extend(t.cells.first().into_iter().flatten().map(|&v| fmt(v)));
        rec.push(fmt(t.mean.first().copied().flatten()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("mape-percentiles.csv"))?;
    let mut header = vec!["model".to_string()];
    header.extend(cfg.percentiles.iter().map(|p| format!("p{p}")));
    w.write_record(&header)?;
    for m in &models {
        if r.find(m, Metric::Mape, 0.0, None, Some(cfg.percentiles[0])).is_none() {
            continue;
        }
        let mut rec = vec![m.clone()];
        rec.extend(cfg.percentiles.iter().map(|&p| fmt(r.find(m, Metric::Mape, 0.0, None, Some(p)).and_then(|e| e.value))));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("ape-minute.csv"))?;
    w.write_record(["model", "minute", "mean", "median", "support"])?;
    for (m, pts) in &ev.ape {
        for p in pts {
            w.write_record([m.clone(), p.minute.to_string(), p.mean.to_string(), p.median.to_string(), p.support.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn load_evaluation(dir: &Path) -> Result<Evaluation> {
    Ok(Evaluation { report: EvaluationReport::read_json(&dir.join("report.json"))?, ape: read_json(&dir.join("ape.json"))? })
}

fn flatten(input: &NetInput) -> Vec<f64> {
    let mut v = input.statics.clone();
    if let Some(w) = &input.window {
        v.extend_from_slice(&w.data);
    }
    if let Some(s) = &input.snapshot {
        v.extend(s.to_vec());
    }
    v
}

fn explain_stage(cfg: &PipelineConfig, records: &[IncidentRecord], split: &Split, schema: &Schema, dy: &DynamicModels, dir: &Path) -> Result<Vec<explain::Attribution>> {
    let (head, net) = dy.sliding.first().ok_or_else(|| Error::Empty("no sliding-window network".into()))?;
    let ec = &cfg.explain;
    let every = cfg.nn.sample_every;
    let stats = &net.channel_stats;
    let w = net.spec.window;
    let train = pick(records, &split.train);
    let test = pick(records, &split.test);
    let bg_all = dynamic_samples(&train, schema, Mode::Sliding, w, every, stats)?;
    let q_all = dynamic_samples(&test, schema, Mode::Sliding, w, every, stats)?;
    let background: Vec<Vec<f64>> =
        explain::subsample(bg_all.len(), ec.background, mix(cfg.seed, &[0xb9])).into_iter().map(|i| flatten(&bg_all[i].input)).collect();
    let queries: Vec<Vec<f64>> =
        explain::subsample(q_all.len(), ec.queries, mix(cfg.seed, &[0x9e])).into_iter().map(|i| flatten(&q_all[i].input)).collect();
    if background.is_empty() || queries.is_empty() {
        return Err(Error::Empty("no samples to explain".into()));
    }

    let sw = schema.width();
    let width = w + 1;
    let channels = ["speed", "flow", "travel_time"];
    let players: Vec<Player> = if ec.grouped {
        let mut g = schema.groups();
        g.extend(channels.iter().enumerate().map(|(c, n)| (format!("{n}_window"), sw + c * width..sw + (c + 1) * width)));
        grouped_players(&g)
    } else {
        let mut names = schema.column_names();
        for n in channels {
            names.extend((0..width).map(|k| format!("{n}[t-{}]", w - k)));
        }
        flat_players(&names)
    };
    let horizons: Vec<f64> = ec.horizons.iter().map(|&h| h as f64).collect();
    let model = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<NetInput> = rows
            .iter()
            .map(|r| NetInput { statics: r[..sw].to_vec(), window: Some(ResidualWindow { width, data: r[sw..].to_vec() }), snapshot: None })
            .collect();
        let curves = net.forward_batch(&inputs.iter().collect::<Vec<_>>())?;
        Ok(curves.iter().map(|c| horizons.iter().map(|&h| c.cdf(h)).collect()).collect())
    };
    let method = if players.len() <= explain::MAX_EXACT_PLAYERS {
        Method::Exact
    } else {
        Method::Permutation { n_permutations: ec.permutations, draws: ec.draws }
    };
    let outputs: Vec<usize> = (0..horizons.len()).collect();
    let attrs = explain_queries(&model, &queries, &background, &players, &outputs, method, mix(cfg.seed, &[0x5a]))?;
    let label = |o: usize| ec.horizons[o].to_string();
    explain::write_attributions_csv(&attrs, &dir.join("attributions.csv"), label)?;
    let table = explain::importance_table(&attrs)?;
    table.write_csv(&dir.join("importance.csv"), label)?;
    write_json(&dir.join("attributions.json"), &attrs)?;
    log::info!("explained {} queries of {} with {} players", queries.len(), sliding_name(*head), players.len());
    Ok(attrs)
}

/// Everything produced by a run up to its last requested stage.
pub struct RunOutcome {
    pub stages: Vec<(Stage, bool)>,
    pub records: Vec<IncidentRecord>,
    pub split: Option<Split>,
    pub static_models: Option<StaticModels>,
    pub dynamic_models: Option<DynamicModels>,
    pub evaluation: Option<Evaluation>,
    pub attributions: Option<Vec<explain::Attribution>>,
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

/// Run every stage up to and including `until`, reusing cached stages.
pub fn run(corpus_dir: &Path, work: &Path, cfg: &PipelineConfig, until: Stage) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(work)?;
    let inputs = CORPUS_FILES
        .iter()
        .map(|f| Ok((f.to_string(), file_digest(&corpus_dir.join(f))?)))
        .collect::<Result<Vec<_>>>()?;
    write_json(
        &work.join("manifest.json"),
        &RunManifest { version: VERSION.into(), config: cfg.clone(), corpus: corpus_dir.to_path_buf(), inputs: inputs.clone() },
    )?;
    let mut log = Vec::new();
    let mut out = RunOutcome {
        stages: Vec::new(),
        records: Vec::new(),
        split: None,
        static_models: None,
        dynamic_models: None,
        evaluation: None,
        attributions: None,
    };

    let input_key = serde_json::to_string(&inputs)?;
    let c = json(&cfg.baseline);
    let d_label = chain_digest(&["label", &c.to_string(), &input_key]);
    out.records = cached(
        work,
        Stage::Label,
        &d_label,
        c,
        &mut log,
        |dir| {
            let corpus = Corpus::load(corpus_dir)?;
            let lc = label_corpus(&corpus, &cfg.baseline)?;
            write_jsonl(std::fs::File::create(dir.join("records.jsonl"))?, &lc.records)?;
            write_jsonl(std::fs::File::create(dir.join("labels.jsonl"))?, &lc.labels)?;
            write_profiles_csv(BufWriter::new(std::fs::File::create(dir.join("profiles.csv"))?), &lc.profiles)?;
            Ok(lc.records)
        },
        |dir| read_jsonl(std::fs::File::open(dir.join("records.jsonl"))?),
    )?;
    let finish = |mut out: RunOutcome, log: Vec<(Stage, bool)>| {
        out.stages = log;
        Ok(out)
    };
    if until == Stage::Label {
        return finish(out, log);
    }

    let c = json(&(&cfg.split, cfg.seed));
    let d_split = chain_digest(&["split", &c.to_string(), &d_label]);
    let records = &out.records;
    let split = cached(
        work,
        Stage::Split,
        &d_split,
        c,
        &mut log,
        |dir| {
            let s = split_records(records, &cfg.split, cfg.seed);
            write_json(&dir.join("split.json"), &s)?;
            Ok(s)
        },
        |dir| read_json(&dir.join("split.json")),
    )?;
    log::info!("split: {} train, {} holdout, {} test", split.train.len(), split.holdout.len(), split.test.len());
    if until == Stage::Split {
        out.split = Some(split);
        return finish(out, log);
    }

    let c = json(&(&cfg.cox, cfg.aic_selection, &cfg.forest, &cfg.nn, cfg.seed));
    let d_static = chain_digest(&["fit-static", &c.to_string(), &d_split]);
    let st = cached(work, Stage::FitStatic, &d_static, c, &mut log, |dir| fit_static(cfg, records, &split, dir), |dir| load_static(cfg, dir))?;
    if until == Stage::FitStatic {
        out.split = Some(split);
        out.static_models = Some(st);
        return finish(out, log);
    }

    let c = json(&(&cfg.cox, &cfg.forest, &cfg.landmark, &cfg.nn, cfg.seed));
    let d_dynamic = chain_digest(&["fit-dynamic", &c.to_string(), &d_static]);
    let schema = &st.schema;
    let dy = cached(
        work,
        Stage::FitDynamic,
        &d_dynamic,
        c,
        &mut log,
        |dir| fit_dynamic(cfg, records, &split, schema, dir),
        |dir| load_dynamic(cfg, dir),
    )?;
    if until == Stage::FitDynamic {
        out.split = Some(split);
        out.static_models = Some(st);
        out.dynamic_models = Some(dy);
        return finish(out, log);
    }

    let c = json(&(&cfg.eval_times, &cfg.horizons, &cfg.percentiles, cfg.ape_from, cfg.ape_step));
    let d_eval = chain_digest(&["evaluate", &c.to_string(), &d_dynamic]);
    let ev = cached(work, Stage::Evaluate, &d_eval, c, &mut log, |dir| evaluate(cfg, records, &split, &st, &dy, dir), load_evaluation)?;
    out.evaluation = Some(ev);
    if until == Stage::Evaluate || !cfg.explain.enabled {
        out.split = Some(split);
        out.static_models = Some(st);
        out.dynamic_models = Some(dy);
        return finish(out, log);
    }

    let c = json(&cfg.explain);
    let d_explain = chain_digest(&["explain", &c.to_string(), &d_dynamic]);
    let attrs = cached(
        work,
        Stage::Explain,
        &d_explain,
        c,
        &mut log,
        |dir| explain_stage(cfg, records, &split, schema, &dy, dir),
        |dir| read_json(&dir.join("attributions.json")),
    )?;
    out.attributions = Some(attrs);
    out.split = Some(split);
    out.static_models = Some(st);
    out.dynamic_models = Some(dy);
    finish(out, log)
}

/// Compact settings for smoke runs and tests.
pub fn smoke_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.forest.n_trees = 50;
    cfg.landmark = LandmarkConfig { landmark_times: vec![0, 15, 30, 60], horizons: vec![15, 30, 60, 120] };
    cfg.eval_times = vec![0, 15, 30, 60];
    cfg.horizons = vec![15, 30, 60, 120];
    cfg.ape_step = 15.0;
    cfg.nn.trials = 1;
    cfg.nn.heads = vec![HeadKind::Mixture];
    cfg.nn.train.max_epochs = 3;
    cfg.nn.windows = Some(vec![30]);
    cfg.nn.neurons = Some(vec![32]);
    cfg.nn.dense_layers = Some(vec![1]);
    cfg.nn.learning_rates = Some(vec![1e-2]);
    cfg.nn.sample_every = 15;
    cfg.explain.queries = 3;
    cfg.explain.background = 8;
    cfg.explain.permutations = 2;
    cfg.explain.horizons = vec![30, 60];
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, SyntheticConfig};

    fn record(id: u64, duration: f64) -> IncidentRecord {
        IncidentRecord {
            id,
            link_id: 0,
            start: 0,
            duration,
            event: true,
            covariates: Default::default(),
            trace: crate::features::IncidentTrace { pre: 0, channels: [vec![], vec![], vec![]] },
            true_duration: None,
        }
    }

    #[test]
    fn split_ratios_and_stratification() {
        let recs: Vec<IncidentRecord> = (0..1000).map(|i| record(i * 7 + 3, 5.0 + (i % 400) as f64)).collect();
        let s = split_records(&recs, &SplitConfig::default(), 1);
        assert_eq!(s.train.len() + s.holdout.len() + s.test.len(), 1000);
        assert!((s.train.len() as i64 - 480).abs() <= 4);
        assert!((s.holdout.len() as i64 - 210).abs() <= 4);
        let dur = |ids: &[u64]| {
            let v: Vec<f64> = pick(&recs, ids).iter().map(|r| r.duration).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((dur(&s.train) - dur(&s.test)).abs() < 15.0);
        assert_eq!(s, split_records(&recs, &SplitConfig::default(), 1));
        assert_ne!(s, split_records(&recs, &SplitConfig::default(), 2));
    }

    #[test]
    fn pairs_cover_every_dynamic_net() {
        let p = dynamic_static_pairs(&[HeadKind::Kernel]);
        assert_eq!(p.len(), 3);
        assert_eq!(p[2], ("sliding-kernel".to_string(), "nn-static-kernel".to_string()));
    }

    #[test]
    fn smoke_run_caches_and_reports() {
        let corpus_dir = tempfile::tempdir().unwrap();
        let work = tempfile::tempdir().unwrap();
        let gen = SyntheticConfig { n_links: 6, weeks: 4, incident_rate: 3.0, seed: 3, ..Default::default() };
        generate_corpus(&gen).unwrap().save(corpus_dir.path()).unwrap();
        let cfg = smoke_config();
        let out = run(corpus_dir.path(), work.path(), &cfg, Stage::Explain).unwrap();
        assert!(out.stages.iter().all(|s| !s.1));
        let ev = out.evaluation.as_ref().unwrap();
        for m in ["cox", "aft-ln", "aft-w", "rsf", "nn-static-mixture"] {
            assert!(ev.report.find(m, Metric::Cindex, 0.0, None, None).is_some(), "{m}");
        }
        for m in ["landmark-cox", "landmark-rsf", "sliding-mixture", "raw-dynamic-mixture"] {
            assert!(ev.report.find(m, Metric::Brier, 30.0, Some(30.0), None).is_some(), "{m}");
            assert!(ev.report.find(m, Metric::Mape, 0.0, None, Some(50.0)).is_some(), "{m}");
        }
        assert!(ev.report.entries.iter().all(|e| e.value.is_none_or(|v| v.is_finite() && v >= 0.0)));
        let tables = work.path().join("evaluate/tables");
        let t = std::fs::read_to_string(tables.join("sliding-mixture-cindex.csv")).unwrap();
        assert_eq!(t.lines().next().unwrap(), "t,15,30,60,120,mean");
        let attrs = out.attributions.unwrap();
        assert!(attrs.iter().all(|a| a.residual().abs() < 1e-8));
        assert!(work.path().join("explain/importance.csv").exists());

        let again = run(corpus_dir.path(), work.path(), &cfg, Stage::Explain).unwrap();
        assert!(again.stages.iter().all(|s| s.1), "{:?}", again.stages);
        assert_eq!(again.evaluation.unwrap().report, ev.report);

        let mut changed = cfg.clone();
        changed.horizons = vec![15, 60];
        let third = run(corpus_dir.path(), work.path(), &changed, Stage::Evaluate).unwrap();
        let cached: Vec<bool> = third.stages.iter().map(|s| s.1).collect();
        assert_eq!(cached, vec![true, true, true, true, false]);
    }
}
