//! Minibatch training with early stopping, and random hyper-parameter search.

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{composite_loss, Head, HitNet, Mode, NetInput, NetSpec, Target};
use crate::dataset::IncidentRecord;
use crate::error::{Error, Result};
use crate::features::{ChannelStats, IncidentTrace, Schema};
use crate::grid::TimeGrid;
use crate::par;
use crate::rng::{keyed, mix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: NetInput,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Non-improving epochs before the learning rate is halved.
    pub decay_patience: usize,
    /// Non-improving epochs before training stops.
    pub stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_epochs: 200, decay_patience: 5, stop_patience: 15, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Epoch 0 holds the losses at initialization.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn best_holdout(&self) -> f64 {
        self.epochs.iter().map(|e| e.holdout_loss).fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Window or snapshot input `t` minutes after an incident start.
pub fn dynamic_input(
    mode: Mode,
    window: usize,
    stats: &ChannelStats,
    statics: Vec<f64>,
    trace: &IncidentTrace,
    t: usize,
) -> Result<NetInput> {
    Ok(match mode {
        Mode::Static => NetInput::fixed(statics),
        Mode::Sliding => NetInput { statics, window: Some(trace.window(t, window, stats)?), snapshot: None },
        Mode::RawDynamic => NetInput { statics, window: None, snapshot: Some(trace.snapshot(t)?) },
    })
}

pub fn static_samples(records: &[&IncidentRecord], schema: &Schema) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            Ok(Sample {
                input: NetInput::fixed(schema.encode(&r.covariates)?),
                target: Target { time: r.duration, event: r.event },
            })
        })
        .collect()
}

/// Samples at every `every` minutes while each incident is still active,
/// with targets measured from the prediction time.
pub fn dynamic_samples(
    records: &[&IncidentRecord],
    schema: &Schema,
    mode: Mode,
    window: usize,
    every: usize,
    stats: &ChannelStats,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for r in records {
        let statics = schema.encode(&r.covariates)?;
        let mut t = 0;
        while r.active_at(t as f64) && t < r.trace.span() {
            out.push(Sample {
                input: dynamic_input(mode, window, stats, statics.clone(), &r.trace, t)?,
                target: Target { time: r.duration - t as f64, event: r.event },
            });
            t += every.max(1);
        }
    }
    Ok(out)
}

/// Mean composite loss per sample over fixed consecutive batches, without
/// dropout or weight penalty.
pub fn mean_loss(net: &HitNet, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(net.spec.batch) {
        let inputs: Vec<&NetInput> = chunk.iter().map(|s| &s.input).collect();
        let targets: Vec<Target> = chunk.iter().map(|s| s.target).collect();
        let pmf = net.pmf_batch(&inputs)?;
        total += composite_loss(&pmf, &net.grid, &targets, net.spec.eta_sigma).total();
    }
    Ok(total / samples.len().max(1) as f64)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Vec<f64>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    fn update(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (i, (w, gi)) in p.iter_mut().zip(g).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gi;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gi * gi;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Adam on shuffled minibatches; returns the parameters with the lowest
/// holdout loss seen (initialization included).
pub fn train(mut net: HitNet, train: &[Sample], holdout: &[Sample], cfg: &TrainConfig) -> Result<(HitNet, History)> {
    if train.is_empty() || holdout.is_empty() {
        return Err(Error::Empty("training and holdout sets must be non-empty".into()));
    }
    let mut lr = net.spec.learning_rate;
    let init_holdout = mean_loss(&net, holdout)?;
    let mut history = History {
        epochs: vec![EpochRecord {
            epoch: 0,
            train_loss: mean_loss(&net, train)?,
            holdout_loss: init_holdout,
            learning_rate: lr,
        }],
        best_epoch: 0,
    };
    let mut best = (init_holdout, net.params.clone());
    let mut adam = Adam::new(&net.params);
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut keyed(cfg.seed, epoch as u64, 1));
        let mut dropout = keyed(cfg.seed, epoch as u64, 2);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(net.spec.batch).enumerate() {
            let inputs: Vec<&NetInput> = chunk.iter().map(|&i| &train[i].input).collect();
            let targets: Vec<Target> = chunk.iter().map(|&i| train[i].target).collect();
            let (value, grads) = net.loss_and_grad(&inputs, &targets, Some(&mut dropout))?;
            if !value.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Training { epoch, batch: b });
            }
            total += value;
            adam.update(&mut net.params, &grads, lr);
        }
        let holdout_loss = mean_loss(&net, holdout)?;
        if !holdout_loss.is_finite() {
            return Err(Error::Training { epoch, batch: usize::MAX });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            holdout_loss,
            learning_rate: lr,
        });
        if holdout_loss < best.0 {
            best = (holdout_loss, net.params.clone());
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.stop_patience {
                break;
            }
            if stale % cfg.decay_patience == 0 {
                lr *= 0.5;
            }
        }
    }
    net.params = best.1;
    Ok((net, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Nonparametric,
    Mixture,
    Kernel,
}

/// Candidate values per hyper-parameter; each trial draws every field
/// uniformly and independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub mode: Mode,
    pub conv_layers: Vec<usize>,
    pub filters: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub dense_layers: Vec<usize>,
    pub neurons: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub windows: Vec<usize>,
    pub heads: Vec<HeadKind>,
    pub mixtures: Vec<usize>,
    pub bandwidth: f64,
    pub eta_sigmas: Vec<f64>,
    pub dropout: f64,
    pub l1: f64,
    pub l2: f64,
    pub batch: usize,
}

impl SearchSpace {
    pub fn table(mode: Mode) -> Self {
        Self {
            mode,
            conv_layers: vec![1, 2, 3],
            filters: vec![4, 8, 16],
            kernel_sizes: vec![5, 10],
            dense_layers: vec![1, 2, 3],
            neurons: vec![32, 64, 128, 256],
            learning_rates: vec![1e-4, 1e-2],
            windows: vec![30, 60],
            heads: vec![HeadKind::Nonparametric, HeadKind::Mixture, HeadKind::Kernel],
            mixtures: vec![1, 2, 3],
            bandwidth: 3.0,
            eta_sigmas: vec![0.1, 1.0],
            dropout: 0.5,
            l1: 1e-4,
            l2: 1e-4,
            batch: 128,
        }
    }

    /// The same space restricted to one output head.
    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.heads = vec![head];
        self
    }

    pub fn draw(&self, rng: &mut crate::rng::Rng) -> NetSpec {
        fn pick<T: Copy>(v: &[T], rng: &mut crate::rng::Rng) -> T {
            *v.choose(rng).expect("search dimension has candidates")
        }
        let head = match pick(&self.heads, rng) {
            HeadKind::Nonparametric => Head::Nonparametric,
            HeadKind::Mixture => Head::Mixture { components: pick(&self.mixtures, rng) },
            HeadKind::Kernel => Head::Kernel { bandwidth: self.bandwidth },
        };
        let mut spec = NetSpec {
            mode: self.mode,
            conv_layers: pick(&self.conv_layers, rng),
            filters: pick(&self.filters, rng),
            kernel_size: pick(&self.kernel_sizes, rng),
            dense_layers: pick(&self.dense_layers, rng),
            neurons: pick(&self.neurons, rng),
            dropout: self.dropout,
            l1: self.l1,
            l2: self.l2,
            learning_rate: pick(&self.learning_rates, rng),
            window: pick(&self.windows, rng),
            head,
            eta_sigma: pick(&self.eta_sigmas, rng),
            batch: self.batch,
        };
        if self.mode != Mode::Sliding {
            // Convolution and window settings are inert without a window.
            spec.conv_layers = self.conv_layers[0];
            spec.filters = self.filters[0];
            spec.kernel_size = self.kernel_sizes[0];
            spec.window = self.windows[0];
        }
        spec
    }
}

/// Inputs for one trial; windows must match the spec's width.
pub struct TrialData {
    pub static_width: usize,
    pub grid: TimeGrid,
    pub channel_stats: ChannelStats,
    pub schema_digest: String,
    pub train: Vec<Sample>,
    pub holdout: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub spec: NetSpec,
    pub holdout_loss: f64,
    pub n_params: usize,
    pub epochs: usize,
}

pub struct SearchOutcome {
    pub best: HitNet,
    pub history: History,
    /// Distinct specs ranked by holdout loss, then parameter count.
    pub leaderboard: Vec<TrialResult>,
}

/// Initialize, standardize and train one spec.
pub fn fit_spec(spec: &NetSpec, data: &TrialData, cfg: &TrainConfig, seed: u64) -> Result<(HitNet, History)> {
    let mut net = HitNet::new(spec.clone(), data.static_width, data.grid.clone(), seed)?;
    net.channel_stats = data.channel_stats.clone();
    net.schema_digest = data.schema_digest.clone();
    net.fit_standardization(data.train.iter().map(|s| &s.input))?;
    let logs: Vec<f64> = data.train.iter().map(|s| s.target.time.max(1.0).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / logs.len() as f64).sqrt();
    net.init_mixture_bias(mean, sd.max(0.1));
    train(net, &data.train, &data.holdout, &TrainConfig { seed, ..cfg.clone() })
}

pub fn random_search<F>(space: &SearchSpace, trials: usize, cfg: &TrainConfig, data: F) -> Result<SearchOutcome>
where
    F: Fn(&NetSpec) -> Result<TrialData> + Sync,
{
    let mut specs: Vec<NetSpec> = Vec::new();
    for trial in 0..trials {
        let spec = space.draw(&mut keyed(cfg.seed, trial as u64, 7));
        if !specs.contains(&spec) {
            specs.push(spec);
        }
    }
    let fitted = par::map_range(specs.len(), |k| -> Result<(HitNet, History)> {
        let d = data(&specs[k])?;
        fit_spec(&specs[k], &d, cfg, mix(cfg.seed, &[k as u64]))
    });
    let mut ranked: Vec<(TrialResult, Option<(HitNet, History)>)> = Vec::new();
    for (spec, res) in specs.into_iter().zip(fitted) {
        match res {
            Ok((net, hist)) => ranked.push((
                TrialResult {
                    holdout_loss: hist.best_holdout(),
                    n_params: net.n_params(),
                    epochs: hist.epochs.len() - 1,
                    spec,
                },
                Some((net, hist)),
            )),
            Err(e) => {
                log::warn!("search trial failed: {e}");
                ranked.push((
                    TrialResult { spec, holdout_loss: f64::INFINITY, n_params: usize::MAX, epochs: 0 },
                    None,
                ));
            }
        }
    }
    ranked.sort_by(|a, b| {
        a.0.holdout_loss
            .total_cmp(&b.0.holdout_loss)
            .then(a.0.n_params.cmp(&b.0.n_params))
    });
    let leaderboard: Vec<TrialResult> = ranked.iter().map(|r| r.0.clone()).collect();
    let (best, history) = ranked
        .into_iter()
        .find_map(|r| r.1)
        .ok_or_else(|| Error::Empty("every search trial failed".into()))?;
    Ok(SearchOutcome { best, history, leaderboard })
}
