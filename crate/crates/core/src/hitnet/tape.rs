//! Reverse-mode differentiation over row-batched dense tensors.

use std::sync::Arc;

use crate::special::{norm_cdf, norm_pdf};

/// Row-major matrix; rows are batch samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self { rows: rows.len(), cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Gaussian kernels centred on each grid point, each normalized to unit
/// mass over the grid and truncated at eight bandwidths.
#[derive(Clone, Debug)]
pub struct Smoother {
    len: usize,
    first: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

impl Smoother {
    pub fn gaussian(points: &[f64], bandwidth: f64) -> Self {
        let len = points.len();
        let mut first = Vec::with_capacity(len);
        let mut weights = Vec::with_capacity(len);
        for &c in points {
            let lo = points.partition_point(|&t| t < c - 8.0 * bandwidth);
            let hi = points.partition_point(|&t| t <= c + 8.0 * bandwidth).max(lo + 1);
            let mut w: Vec<f64> = points[lo..hi]
                .iter()
                .map(|&t| {
                    let u = (t - c) / bandwidth;
                    (-0.5 * u * u).exp()
                })
                .collect();
            let s: f64 = w.iter().sum();
            if s > 0.0 && s.is_finite() {
                w.iter_mut().for_each(|v| *v /= s);
            } else {
                w = points[lo..hi].iter().map(|&t| if t == c { 1.0 } else { 0.0 }).collect();
            }
            first.push(lo);
            weights.push(w);
        }
        Self { len, first, weights }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Mass that centre `i` spreads onto each grid point.
    pub fn spread(&self, i: usize) -> (usize, &[f64]) {
        (self.first[i], &self.weights[i])
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Mask { x: Var, mask: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var, channels: usize },
    Concat(Var, Var),
    Softmax(Var),
    Smooth { x: Var, kernel: Arc<Smoother> },
    Mixture { x: Var, log_edges: Arc<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// `x W + b` with `W` of shape `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols, wv.rows, "linear input width");
        let mut out = Tensor::zeros(xv.rows, wv.cols);
        for r in 0..xv.rows {
            let o = &mut out.data[r * wv.cols..(r + 1) * wv.cols];
            o.copy_from_slice(&bv.data);
            for (i, &xi) in xv.row(r).iter().enumerate() {
                if xi != 0.0 {
                    for (oo, ww) in o.iter_mut().zip(wv.row(i)) {
                        *oo += xi * ww;
                    }
                }
            }
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Elementwise product with a constant mask (inverted dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.data.len(), mask.len(), "mask size");
        out.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        self.push(out, Op::Mask { x, mask })
    }

    /// Valid 1-D convolution. Rows of `x` hold `channels` series back to
    /// back; `w` is `out_channels x (channels * kernel)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, channels: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let len = xv.cols / channels;
        let kernel = wv.cols / channels;
        assert!(len >= kernel, "window shorter than kernel");
        let out_len = len - kernel + 1;
        let filters = wv.rows;
        let mut out = Tensor::zeros(xv.rows, filters * out_len);
        for r in 0..xv.rows {
            let xr = xv.row(r);
            let or = &mut out.data[r * filters * out_len..(r + 1) * filters * out_len];
            for f in 0..filters {
                let wf = wv.row(f);
                let dst = &mut or[f * out_len..(f + 1) * out_len];
                dst.iter_mut().for_each(|v| *v = bv.data[f]);
                for c in 0..channels {
                    let xs = &xr[c * len..(c + 1) * len];
                    for k in 0..kernel {
                        let wk = wf[c * kernel + k];
                        for (l, d) in dst.iter_mut().enumerate() {
                            *d += wk * xs[l + k];
                        }
                    }
                }
            }
        }
        self.push(out, Op::Conv1d { x, w, b, channels })
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat rows");
        let mut out = Tensor::zeros(av.rows, av.cols + bv.cols);
        for r in 0..av.rows {
            let o = out.row_mut(r);
            o[..av.cols].copy_from_slice(av.row(r));
            o[av.cols..].copy_from_slice(bv.row(r));
        }
        self.push(out, Op::Concat(a, b))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(x))
    }

    /// Spread each grid weight over the grid with the kernel smoother.
    pub fn smooth(&mut self, x: Var, kernel: &Arc<Smoother>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols, kernel.len(), "smoother width");
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let xr = xv.row(r);
            let or = &mut out.data[r * xv.cols..(r + 1) * xv.cols];
            for (i, &wi) in xr.iter().enumerate() {
                let (lo, ws) = kernel.spread(i);
                for (o, k) in or[lo..lo + ws.len()].iter_mut().zip(ws) {
                    *o += wi * k;
                }
            }
        }
        self.push(out, Op::Smooth { x, kernel: Arc::clone(kernel) })
    }

    /// Log-normal mixture discretized on a grid. Rows of `x` hold
    /// `[weight logits | log-scale means | log standard deviations]`;
    /// `log_edges[k]` is the log of grid point `k` (the last point takes the
    /// remaining tail).
    pub fn lognormal_mixture(&mut self, x: Var, log_edges: &Arc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        let m = xv.cols / 3;
        let bins = log_edges.len();
        let mut out = Tensor::zeros(xv.rows, bins);
        for r in 0..xv.rows {
            let (pi, mu, sigma) = mixture_params(xv.row(r), m);
            let o = out.row_mut(r);
            for j in 0..m {
                let mut prev = 0.0;
                for k in 0..bins {
                    let c = if k + 1 == bins {
                        1.0
                    } else if log_edges[k] == f64::NEG_INFINITY {
                        0.0
                    } else {
                        norm_cdf((log_edges[k] - mu[j]) / sigma[j])
                    };
                    o[k] += pi[j] * (c - prev).max(0.0);
                    prev = c;
                }
            }
        }
        self.push(out, Op::Mixture { x, log_edges: Arc::clone(log_edges) })
    }

    /// Gradients of `sum(seed * out)` with respect to every leaf; interior
    /// slots are cleared.
    pub fn backward(&self, out: Var, seed: Tensor) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    let mut gw = Tensor::zeros(wv.rows, wv.cols);
                    let mut gb = Tensor::zeros(1, wv.cols);
                    for r in 0..xv.rows {
                        let gr = g.row(r);
                        for (a, v) in gb.data.iter_mut().zip(gr) {
                            *a += v;
                        }
                        let xr = xv.row(r);
                        for i in 0..xv.cols {
                            let wi = wv.row(i);
                            gx.data[r * xv.cols + i] = wi.iter().zip(gr).map(|(a, b)| a * b).sum();
                            if xr[i] != 0.0 {
                                for (a, v) in gw.row_mut(i).iter_mut().zip(gr) {
                                    *a += xr[i] * v;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (a, v) in gx.data.iter_mut().zip(&node.value.data) {
                        if *v <= 0.0 {
                            *a = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mask { x, mask } => {
                    let mut gx = g;
                    gx.data.iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Conv1d { x, w, b, channels } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let channels = *channels;
                    let len = xv.cols / channels;
                    let kernel = wv.cols / channels;
                    let out_len = len - kernel + 1;
                    let filters = wv.rows;
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    let mut gw = Tensor::zeros(wv.rows, wv.cols);
                    let mut gb = Tensor::zeros(1, filters);
                    for r in 0..xv.rows {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        for f in 0..filters {
                            let gf = &gr[f * out_len..(f + 1) * out_len];
                            gb.data[f] += gf.iter().sum::<f64>();
                            for c in 0..channels {
                                let xs = &xr[c * len..(c + 1) * len];
                                for k in 0..kernel {
                                    let widx = c * kernel + k;
                                    let wk = wv.data[f * wv.cols + widx];
                                    let mut acc = 0.0;
                                    for (l, gl) in gf.iter().enumerate() {
                                        acc += gl * xs[l + k];
                                        gx.data[r * xv.cols + c * len + l + k] += gl * wk;
                                    }
                                    gw.data[f * wv.cols + widx] += acc;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Concat(a, b) => {
                    let ac = self.value(*a).cols;
                    let bc = self.value(*b).cols;
                    let mut ga = Tensor::zeros(g.rows, ac);
                    let mut gb = Tensor::zeros(g.rows, bc);
                    for r in 0..g.rows {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Softmax(x) => {
                    let mut gx = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        softmax_backward(node.value.row(r), g.row(r), gx.row_mut(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Smooth { x, kernel } => {
                    let mut gx = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        for (i, a) in gx.row_mut(r).iter_mut().enumerate() {
                            let (lo, ws) = kernel.spread(i);
                            *a = gr[lo..lo + ws.len()].iter().zip(ws).map(|(u, v)| u * v).sum();
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mixture { x, log_edges } => {
                    let xv = self.value(*x);
                    let m = xv.cols / 3;
                    let bins = log_edges.len();
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        let row = xv.row(r);
                        let (pi, mu, sigma) = mixture_params(row, m);
                        let gr = g.row(r);
                        let mut gpi = vec![0.0; m];
                        let grow = gx.row_mut(r);
                        for j in 0..m {
                            let mut prev = 0.0;
                            let (mut gmu, mut gls) = (0.0, 0.0);
                            for k in 0..bins {
                                if k + 1 == bins {
                                    gpi[j] += gr[k] * (1.0 - prev);
                                    break;
                                }
                                if log_edges[k] == f64::NEG_INFINITY {
                                    continue;
                                }
                                let z = (log_edges[k] - mu[j]) / sigma[j];
                                let c = norm_cdf(z);
                                gpi[j] += gr[k] * (c - prev);
                                prev = c;
                                if z.is_finite() {
                                    let gz = pi[j] * (gr[k] - gr[k + 1]) * norm_pdf(z);
                                    gmu -= gz / sigma[j];
                                    gls -= gz * z;
                                }
                            }
                            grow[m + j] = gmu;
                            grow[2 * m + j] = if log_sd_in_range(row[2 * m + j]) { gls } else { 0.0 };
                        }
                        softmax_backward(&pi, &gpi, &mut grow[..m]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

fn softmax_backward(p: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, pi), gi) in out.iter_mut().zip(p).zip(g) {
        *o = pi * (gi - dot);
    }
}

/// Weights, means and standard deviations from a raw mixture row.
pub(crate) fn mixture_params(row: &[f64], m: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut pi = row[..m].to_vec();
    softmax_in_place(&mut pi);
    let mu = row[m..2 * m].to_vec();
    let sigma = row[2 * m..3 * m].iter().map(|s| s.clamp(-LOG_SD_BOUND, LOG_SD_BOUND).exp()).collect();
    (pi, mu, sigma)
}

/// Mixture log standard deviations are clipped to this magnitude.
const LOG_SD_BOUND: f64 = 8.0;

fn log_sd_in_range(s: f64) -> bool {
    s.abs() < LOG_SD_BOUND
}
