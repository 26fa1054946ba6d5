//! Neural hitting-time models: static feed-forward nets and the
//! sliding-window convolutional net, with softmax, log-normal mixture or
//! kernel-smoothed output heads.

pub mod loss;
pub mod tape;
pub mod train;

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::curve::SurvivalCurve;
use crate::error::{domain, Error, Result};
use crate::features::{ChannelStats, DynamicSnapshot, ResidualWindow};
use crate::grid::TimeGrid;
use crate::rng::{keyed, Rng};
use tape::{Smoother, Tape, Tensor, Var};

pub use loss::{composite_loss, LossValue, Target};
pub use train::{random_search, train, SearchOutcome, SearchSpace, Sample, TrainConfig, TrialResult};

const BLOB_MAGIC: &[u8; 8] = b"RTNHNET1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Static,
    Sliding,
    RawDynamic,
}

impl Mode {
    pub fn is_dynamic(self) -> bool {
        self != Mode::Static
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Static => "static",
            Mode::Sliding => "sliding",
            Mode::RawDynamic => "raw-dynamic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Head {
    Nonparametric,
    Mixture { components: usize },
    Kernel { bandwidth: f64 },
}

impl Head {
    pub fn name(&self) -> String {
        match self {
            Head::Nonparametric => "nonparametric".into(),
            Head::Mixture { components } => format!("mixture{components}"),
            Head::Kernel { .. } => "kernel".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub mode: Mode,
    pub conv_layers: usize,
    pub filters: usize,
    pub kernel_size: usize,
    pub dense_layers: usize,
    pub neurons: usize,
    pub dropout: f64,
    pub l1: f64,
    pub l2: f64,
    pub learning_rate: f64,
    /// History window in minutes; the network sees `window + 1` samples.
    pub window: usize,
    pub head: Head,
    pub eta_sigma: f64,
    pub batch: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Static,
            conv_layers: 1,
            filters: 8,
            kernel_size: 5,
            dense_layers: 1,
            neurons: 64,
            dropout: 0.5,
            l1: 1e-4,
            l2: 1e-4,
            learning_rate: 1e-2,
            window: 30,
            head: Head::Nonparametric,
            eta_sigma: 1.0,
            batch: 128,
        }
    }
}

impl NetSpec {
    /// Grid resolution of the output: 1 minute static, 5 minutes dynamic.
    pub fn resolution(&self) -> f64 {
        if self.mode.is_dynamic() {
            5.0
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dense_layers == 0 || self.neurons == 0 || self.batch == 0 {
            return domain("network needs at least one dense layer, neuron and batch row");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.eta_sigma > 0.0) || !(self.learning_rate > 0.0) {
            return domain("dropout must be in [0, 1), eta_sigma and learning rate positive");
        }
        if self.mode == Mode::Sliding {
            if self.conv_layers == 0 || self.filters == 0 || self.kernel_size == 0 {
                return domain("sliding mode needs convolution layers");
            }
            let shrink = self.conv_layers * (self.kernel_size - 1);
            if shrink >= self.window + 1 {
                return domain(format!(
                    "{} convolutions of width {} do not fit a {}-minute window",
                    self.conv_layers, self.kernel_size, self.window
                ));
            }
        }
        match self.head {
            Head::Mixture { components } if components == 0 => domain("mixture needs a component"),
            Head::Kernel { bandwidth } if !(bandwidth > 0.0) => domain("kernel bandwidth must be positive"),
            _ => Ok(()),
        }
    }
}

/// One network input. Windows are already divided by the net's channel
/// scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetInput {
    pub statics: Vec<f64>,
    pub window: Option<ResidualWindow>,
    pub snapshot: Option<DynamicSnapshot>,
}

impl NetInput {
    pub fn fixed(statics: Vec<f64>) -> Self {
        Self { statics, window: None, snapshot: None }
    }
}

/// Fitted (or freshly initialized) hitting-time network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitNet {
    pub spec: NetSpec,
    /// Output grid relative to the prediction time.
    pub grid: TimeGrid,
    pub static_width: usize,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub channel_stats: ChannelStats,
    pub schema_digest: String,
    pub shapes: Vec<(usize, usize)>,
    #[serde(skip)]
    pub params: Vec<Vec<f64>>,
}

/// Parameter tensors laid out as conv (w, b) pairs, dense (w, b) pairs and
/// the head (w, b).
fn layout(spec: &NetSpec, static_width: usize, bins: usize) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    let mut dense_in = static_width;
    match spec.mode {
        Mode::Static => {}
        Mode::RawDynamic => dense_in += 6,
        Mode::Sliding => {
            let mut channels = 3;
            let mut len = spec.window + 1;
            for _ in 0..spec.conv_layers {
                shapes.push((spec.filters, channels * spec.kernel_size));
                shapes.push((1, spec.filters));
                channels = spec.filters;
                len -= spec.kernel_size - 1;
            }
            dense_in += channels * len;
        }
    }
    for _ in 0..spec.dense_layers {
        shapes.push((dense_in, spec.neurons));
        shapes.push((1, spec.neurons));
        dense_in = spec.neurons;
    }
    let out = match spec.head {
        Head::Mixture { components } => 3 * components,
        _ => bins,
    };
    shapes.push((dense_in, out));
    shapes.push((1, out));
    shapes
}

impl HitNet {
    /// Randomly initialized network with identity input standardization.
    pub fn new(spec: NetSpec, static_width: usize, grid: TimeGrid, seed: u64) -> Result<Self> {
        spec.validate()?;
        let grid = grid.rebased(0.0);
        let shapes = layout(&spec, static_width, grid.len());
        let mut rng = keyed(seed, 0x4e37, 0);
        let n_shapes = shapes.len();
        let conv_tensors = if spec.mode == Mode::Sliding { 2 * spec.conv_layers } else { 0 };
        let params = shapes
            .iter()
            .enumerate()
            .map(|(k, &(r, c))| {
                if k % 2 == 1 {
                    return vec![0.0; r * c];
                }
                let fan_in = if k < conv_tensors { c } else { r };
                let bound = if k + 2 == n_shapes {
                    (6.0 / (fan_in + c) as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                (0..r * c).map(|_| rng.random_range(-bound..bound)).collect()
            })
            .collect();
        let shift_width = static_width + if spec.mode == Mode::RawDynamic { 6 } else { 0 };
        Ok(Self {
            spec,
            grid,
            static_width,
            input_shift: vec![0.0; shift_width],
            input_scale: vec![1.0; shift_width],
            channel_stats: ChannelStats::default(),
            schema_digest: String::new(),
            shapes,
            params,
        })
    }

    pub fn n_params(&self) -> usize {
        self.shapes.iter().map(|(r, c)| r * c).sum()
    }

    /// Indices of weight (not bias) tensors, the ones regularized.
    pub(crate) fn weight_tensors(&self) -> impl Iterator<Item = usize> {
        (0..self.shapes.len()).step_by(2)
    }

    /// Mean and standard deviation of the fixed-width inputs over `inputs`.
    pub fn fit_standardization<'a>(&mut self, inputs: impl IntoIterator<Item = &'a NetInput>) -> Result<()> {
        let w = self.input_shift.len();
        let mut sum = vec![0.0; w];
        let mut sq = vec![0.0; w];
        let mut n = 0.0;
        for x in inputs {
            let row = self.raw_dense_input(x)?;
            for (k, v) in row.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
            n += 1.0;
        }
        if n == 0.0 {
            return Err(Error::Empty("no inputs to standardize on".into()));
        }
        for k in 0..w {
            let mean = sum[k] / n;
            let var = (sq[k] / n - mean * mean).max(0.0);
            self.input_shift[k] = mean;
            self.input_scale[k] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    /// Centre the mixture means and spreads on the observed log-duration
    /// distribution.
    pub fn init_mixture_bias(&mut self, log_mean: f64, log_sd: f64) {
        if let Head::Mixture { components } = self.spec.head {
            let b = self.params.last_mut().expect("head bias");
            for j in 0..components {
                let offset = (j as f64 - (components as f64 - 1.0) / 2.0) * 0.5 * log_sd;
                b[components + j] = log_mean + offset;
                b[2 * components + j] = (log_sd / (components as f64).sqrt()).max(0.05).ln();
            }
        }
    }

    fn raw_dense_input(&self, x: &NetInput) -> Result<Vec<f64>> {
        if x.statics.len() != self.static_width {
            return Err(Error::Shape(format!(
                "expected {} static features, got {}",
                self.static_width,
                x.statics.len()
            )));
        }
        let mut row = x.statics.clone();
        match (self.spec.mode, &x.window, &x.snapshot) {
            (Mode::Static, None, None) => {}
            (Mode::RawDynamic, None, Some(s)) => row.extend(s.to_vec()),
            (Mode::Sliding, Some(w), None) => {
                if w.width != self.spec.window + 1 || w.data.len() != 3 * w.width {
                    return Err(Error::Shape(format!(
                        "window of width {} given to a net expecting {}",
                        w.width,
                        self.spec.window + 1
                    )));
                }
            }
            (mode, w, s) => {
                return Err(Error::Shape(format!(
                    "{} net given window={} snapshot={}",
                    mode.as_str(),
                    w.is_some(),
                    s.is_some()
                )))
            }
        }
        Ok(row)
    }

    /// Build the forward graph for a batch. `dropout` supplies the mask
    /// stream during training.
    pub(crate) fn graph(&self, inputs: &[&NetInput], mut dropout: Option<&mut Rng>) -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .shapes
            .iter()
            .zip(&self.params)
            .map(|(&(r, c), p)| tape.leaf(Tensor { rows: r, cols: c, data: p.clone() }))
            .collect();
        let mut dense_rows = Vec::with_capacity(inputs.len());
        for x in inputs {
            let mut row = self.raw_dense_input(x)?;
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.input_shift[k]) / self.input_scale[k];
            }
            dense_rows.push(row);
        }
        let mut h = tape.leaf(Tensor::from_rows(&dense_rows));
        let mut p = 0;
        if self.spec.mode == Mode::Sliding {
            let windows: Vec<Vec<f64>> =
                inputs.iter().map(|x| x.window.as_ref().expect("validated").data.clone()).collect();
            let mut c = tape.leaf(Tensor::from_rows(&windows));
            let mut channels = 3;
            for _ in 0..self.spec.conv_layers {
                c = tape.conv1d(c, params[p], params[p + 1], channels);
                c = tape.relu(c);
                channels = self.spec.filters;
                p += 2;
            }
            h = tape.concat(h, c);
        }
        for _ in 0..self.spec.dense_layers {
            h = tape.linear(h, params[p], params[p + 1]);
            h = tape.relu(h);
            if let Some(rng) = dropout.as_deref_mut() {
                let keep = 1.0 - self.spec.dropout;
                let n = tape.value(h).data.len();
                let mask = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                h = tape.mask(h, mask);
            }
            p += 2;
        }
        let z = tape.linear(h, params[p], params[p + 1]);
        let out = match self.spec.head {
            Head::Nonparametric => tape.softmax(z),
            Head::Kernel { bandwidth } => {
                let w = tape.softmax(z);
                let smoother = Arc::new(Smoother::gaussian(&self.grid.times(), bandwidth));
                tape.smooth(w, &smoother)
            }
            Head::Mixture { .. } => {
                let edges: Vec<f64> = self.grid.times().iter().map(|t| t.ln()).collect();
                tape.lognormal_mixture(z, &Arc::new(edges))
            }
        };
        Ok((tape, params, out))
    }

    /// Output pmf rows for a batch, without dropout.
    pub fn pmf_batch(&self, inputs: &[&NetInput]) -> Result<Tensor> {
        let (tape, _, out) = self.graph(inputs, None)?;
        Ok(tape.value(out).clone())
    }

    /// Predicted distribution of the remaining duration.
    pub fn forward(&self, x: &NetInput) -> Result<SurvivalCurve> {
        let pmf = self.pmf_batch(&[x])?;
        SurvivalCurve::new(self.grid.clone(), pmf.data)
    }

    pub fn forward_batch(&self, xs: &[&NetInput]) -> Result<Vec<SurvivalCurve>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(self.spec.batch.max(1)) {
            let pmf = self.pmf_batch(chunk)?;
            for r in 0..pmf.rows {
                out.push(SurvivalCurve::new(self.grid.clone(), pmf.row(r).to_vec())?);
            }
        }
        Ok(out)
    }

    /// Composite loss and parameter gradients (penalty included).
    pub fn loss_and_grad(
        &self,
        inputs: &[&NetInput],
        targets: &[Target],
        dropout: Option<&mut Rng>,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let (tape, params, out) = self.graph(inputs, dropout)?;
        let loss = composite_loss(tape.value(out), &self.grid, targets, self.spec.eta_sigma);
        let grads = tape.backward(out, loss.grad.clone());
        let mut value = loss.total();
        let mut g: Vec<Vec<f64>> = params
            .iter()
            .zip(&self.shapes)
            .map(|(v, &(r, c))| grads[v.0].as_ref().map_or(vec![0.0; r * c], |t| t.data.clone()))
            .collect();
        for k in self.weight_tensors() {
            for (gi, w) in g[k].iter_mut().zip(&self.params[k]) {
                value += self.spec.l1 * w.abs() + self.spec.l2 * w * w;
                *gi += self.spec.l1 * w.signum() * f64::from(*w != 0.0) + 2.0 * self.spec.l2 * w;
            }
        }
        Ok((value, g))
    }

    /// Write `<path>.json` metadata and `<path>.bin` parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "format_version": FORMAT_VERSION, "net": self });
        std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path.with_extension("bin"))?);
        f.write_all(BLOB_MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let n = self.n_params() as u64;
        f.write_all(&n.to_le_bytes())?;
        for p in self.params.iter().flatten() {
            f.write_all(&p.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            format_version: u32,
            net: HitNet,
        }
        let meta: Meta = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Refused(format!("network format {} unsupported", meta.format_version)));
        }
        let mut net = meta.net;
        let mut f = std::io::BufReader::new(std::fs::File::open(path.with_extension("bin"))?);
        let mut head = [0u8; 20];
        f.read_exact(&mut head)?;
        let n = u64::from_le_bytes(head[12..20].try_into().expect("8 bytes")) as usize;
        if &head[..8] != BLOB_MAGIC || n != net.n_params() {
            return Err(Error::Refused("parameter blob does not match its metadata".into()));
        }
        let mut buf = [0u8; 8];
        net.params = net
            .shapes
            .iter()
            .map(|&(r, c)| {
                (0..r * c)
                    .map(|_| {
                        f.read_exact(&mut buf)?;
                        Ok(f64::from_le_bytes(buf))
                    })
                    .collect::<std::io::Result<Vec<f64>>>()
            })
            .collect::<std::io::Result<_>>()?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests;
