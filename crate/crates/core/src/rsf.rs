//! Random survival forests: bootstrap trees split by the log-rank
//! statistic, Nelson–Aalen leaves, out-of-bag error and permutation
//! importance.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::curve::SurvivalCurve;
use crate::error::{domain, Result};
use crate::grid::TimeGrid;
use crate::par;
use crate::rng::{keyed, mix};
use crate::survclassic::SurvData;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Candidate features per split; `None` means `ceil(sqrt(p))`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    /// Random thresholds tried per candidate feature.
    pub n_thresholds: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 1000, mtry: None, min_leaf: 15, n_thresholds: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf(Leaf),
}

/// Nelson–Aalen cumulative hazard of the in-leaf bootstrap samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub times: Vec<f64>,
    pub chf: Vec<f64>,
    pub size: usize,
    /// Sum of the leaf hazard over the training event times.
    pub mortality: f64,
}

impl Leaf {
    pub fn chf_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t + 1e-9) {
            0 => 0.0,
            k => self.chf[k - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvTree {
    pub nodes: Vec<Node>,
    /// Bootstrap draw count per training sample.
    pub inbag: Vec<u32>,
}

impl SurvTree {
    pub fn leaf_for(&self, x: &[f64]) -> &Leaf {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf(l) => return l,
                Node::Split { feature, threshold, left, right } => {
                    k = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn is_oob(&self, i: usize) -> bool {
        self.inbag[i] == 0
    }

    pub fn oob_fraction(&self) -> f64 {
        self.inbag.iter().filter(|&&c| c == 0).count() as f64 / self.inbag.len() as f64
    }

    pub fn uses_feature(&self, f: usize) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n, Node::Split { feature, .. } if *feature == f))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub params: ForestParams,
    pub n_features: usize,
    pub trees: Vec<SurvTree>,
}

/// Standardized two-sample log-rank statistic magnitude.
pub fn logrank_score(left: &[(f64, bool)], right: &[(f64, bool)]) -> f64 {
    let mut all: Vec<(f64, bool, bool)> = left
        .iter()
        .map(|&(t, e)| (t, e, true))
        .chain(right.iter().map(|&(t, e)| (t, e, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let times: Vec<f64> = all.iter().map(|a| a.0).collect();
    let events: Vec<bool> = all.iter().map(|a| a.1).collect();
    let order: Vec<usize> = (0..all.len()).collect();
    logrank_sorted(&order, &times, &events, |i| all[i].2)
}

/// Log-rank statistic over `order` (ascending time) for the split `is_left`.
fn logrank_sorted(order: &[usize], time: &[f64], event: &[bool], is_left: impl Fn(usize) -> bool) -> f64 {
    let mut y = 0.0;
    let mut yl = 0.0;
    let mut num = 0.0f64;
    let mut var = 0.0f64;
    let mut k = order.len();
    while k > 0 {
        let t = time[order[k - 1]];
        let mut d = 0.0;
        let mut dl = 0.0;
        while k > 0 && time[order[k - 1]] == t {
            let i = order[k - 1];
            let l = is_left(i);
            y += 1.0;
            if l {
                yl += 1.0;
            }
            if event[i] {
                d += 1.0;
                if l {
                    dl += 1.0;
                }
            }
            k -= 1;
        }
        if d > 0.0 {
            num += dl - yl * d / y;
            if y > 1.0 {
                let frac = yl / y;
                var += frac * (1.0 - frac) * (y - d) / (y - 1.0) * d;
            }
        }
    }
    if var <= 0.0 {
        0.0
    } else {
        num.abs() / var.sqrt()
    }
}

struct Grower<'a> {
    data: &'a SurvData,
    params: &'a ForestParams,
    mtry: usize,
    event_times: &'a [f64],
}

impl Grower<'_> {
    fn leaf(&self, samples: &[usize]) -> Leaf {
        // `samples` is sorted by ascending time.
        let mut times = Vec::new();
        let mut chf = Vec::new();
        let mut acc = 0.0;
        let n = samples.len();
        let mut k = 0;
        while k < n {
            let t = self.data.time[samples[k]];
            let at_risk = (n - k) as f64;
            let mut d = 0.0;
            while k < n && self.data.time[samples[k]] == t {
                if self.data.event[samples[k]] {
                    d += 1.0;
                }
                k += 1;
            }
            if d > 0.0 {
                acc += d / at_risk;
                times.push(t);
                chf.push(acc);
            }
        }
        let mut leaf = Leaf { times, chf, size: n, mortality: 0.0 };
        leaf.mortality = self.event_times.iter().map(|&t| leaf.chf_at(t)).sum();
        leaf
    }

    fn grow(&self, samples: Vec<usize>, rng: &mut crate::rng::Rng, nodes: &mut Vec<Node>) -> usize {
        let id = nodes.len();
        nodes.push(Node::Leaf(Leaf { times: vec![], chf: vec![], size: 0, mortality: 0.0 }));
        let n = samples.len();
        let has_event = samples.iter().any(|&i| self.data.event[i]);
        let split = if n >= 2 * self.params.min_leaf && has_event {
            self.best_split(&samples, rng)
        } else {
            None
        };
        match split {
            None => nodes[id] = Node::Leaf(self.leaf(&samples)),
            Some((feature, threshold)) => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    samples.iter().partition(|&&i| self.data.x[i][feature] <= threshold);
                drop(samples);
                let left = self.grow(l, rng, nodes);
                let right = self.grow(r, rng, nodes);
                nodes[id] = Node::Split { feature, threshold, left, right };
            }
        }
        id
    }

    fn best_split(&self, samples: &[usize], rng: &mut crate::rng::Rng) -> Option<(usize, f64)> {
        let p = self.data.p();
        let features = sample_indices(rng, p, self.mtry.min(p));
        let mut best: Option<(f64, usize, f64)> = None;
        let mut values: Vec<f64> = Vec::with_capacity(samples.len());
        for f in features.iter() {
            values.clear();
            values.extend(samples.iter().map(|&i| self.data.x[i][f]));
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut cands: Vec<f64> = (0..self.params.n_thresholds)
                .map(|_| values[rng.random_range(0..values.len())])
                .filter(|&v| v < max)
                .collect();
            cands.sort_by(f64::total_cmp);
            cands.dedup();
            for thr in cands {
                let n_left = values.iter().filter(|&&v| v <= thr).count();
                if n_left < self.params.min_leaf || samples.len() - n_left < self.params.min_leaf {
                    continue;
                }
                let score = logrank_sorted(samples, &self.data.time, &self.data.event, |i| {
                    self.data.x[i][f] <= thr
                });
                if score > 0.0 && best.is_none_or(|(s, _, _)| score > s) {
                    best = Some((score, f, thr));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Distinct event times in ascending order.
fn distinct_event_times(data: &SurvData) -> Vec<f64> {
    let mut t: Vec<f64> = (0..data.n()).filter(|&i| data.event[i]).map(|i| data.time[i]).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

pub fn grow_forest(data: &SurvData, params: &ForestParams) -> Result<Forest> {
    let n = data.n();
    if n == 0 || params.n_trees == 0 || params.min_leaf == 0 {
        return domain("forest needs samples, at least one tree and min_leaf >= 1");
    }
    let p = data.p();
    let mtry = params.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).max(1);
    let event_times = distinct_event_times(data);
    let grower = Grower { data, params, mtry, event_times: &event_times };
    let trees = par::map_range(params.n_trees, |b| {
        let mut rng = keyed(params.seed, b as u64, 0);
        let mut inbag = vec![0u32; n];
        let mut samples: Vec<usize> = (0..n)
            .map(|_| {
                let i = rng.random_range(0..n);
                inbag[i] += 1;
                i
            })
            .collect();
        samples.sort_by(|&a, &b| data.time[a].total_cmp(&data.time[b]).then(a.cmp(&b)));
        let mut nodes = Vec::new();
        grower.grow(samples, &mut rng, &mut nodes);
        SurvTree { nodes, inbag }
    });
    Ok(Forest { params: params.clone(), n_features: p, trees })
}

impl Forest {
    /// Mean tree cumulative hazard at grid times relative to the origin.
    pub fn cumulative_hazard(&self, x: &[f64], grid: &TimeGrid) -> Vec<f64> {
        let mut acc = vec![0.0; grid.len()];
        for tree in &self.trees {
            let leaf = tree.leaf_for(x);
            let mut j = 0;
            let mut h = 0.0;
            for (k, a) in acc.iter_mut().enumerate() {
                let t = k as f64 * grid.resolution();
                while j < leaf.times.len() && leaf.times[j] <= t + 1e-9 {
                    h = leaf.chf[j];
                    j += 1;
                }
                *a += h;
            }
        }
        let b = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= b);
        acc
    }

    pub fn predict(&self, x: &[f64], grid: &TimeGrid) -> Result<SurvivalCurve> {
        SurvivalCurve::from_cumulative_hazard(grid.clone(), &self.cumulative_hazard(x, grid))
    }

    /// Out-of-bag ensemble mortality per training sample (`None` if the
    /// sample is in every bootstrap).
    pub fn oob_mortality(&self, data: &SurvData) -> Vec<Option<f64>> {
        self.oob_mortality_with(data, |_, _, x| x.to_vec())
    }

    fn oob_mortality_with<F>(&self, data: &SurvData, route: F) -> Vec<Option<f64>>
    where
        F: Fn(usize, usize, &[f64]) -> Vec<f64> + Sync,
    {
        par::map_range(data.n(), |i| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (b, tree) in self.trees.iter().enumerate() {
                if tree.is_oob(i) {
                    let x = route(b, i, &data.x[i]);
                    sum += tree.leaf_for(&x).mortality;
                    count += 1;
                }
            }
            (count > 0).then(|| sum / count as f64)
        })
    }

    /// Harrell's C of out-of-bag mortality.
    pub fn oob_cindex(&self, data: &SurvData) -> Option<f64> {
        harrell_cindex(&data.time, &data.event, &self.oob_mortality(data))
    }

    /// Leaf reached when every split on `feature` is decided by a fair coin.
    fn leaf_with_coin(&self, tree_id: usize, sample: usize, feature: usize, x: &[f64]) -> &Leaf {
        let tree = &self.trees[tree_id];
        let mut rng = keyed(mix(self.params.seed, &[feature as u64, 0x5eed]), tree_id as u64, sample as u64);
        let mut k = 0;
        loop {
            match &tree.nodes[k] {
                Node::Leaf(l) => return l,
                Node::Split { feature: f, threshold, left, right } => {
                    let go_left = if *f == feature { rng.random::<bool>() } else { x[*f] <= *threshold };
                    k = if go_left { *left } else { *right };
                }
            }
        }
    }

    /// Increase in OOB error (1 - C) when splits on each feature are
    /// randomized, divided by the largest increase.
    pub fn permutation_importance(&self, data: &SurvData) -> Vec<f64> {
        let base = self.oob_cindex(data).map_or(0.5, |c| 1.0 - c);
        let mut imp: Vec<f64> = (0..self.n_features)
            .map(|f| {
                if !self.trees.iter().any(|t| t.uses_feature(f)) {
                    return 0.0;
                }
                let mort: Vec<Option<f64>> = par::map_range(data.n(), |i| {
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for (b, tree) in self.trees.iter().enumerate() {
                        if tree.is_oob(i) {
                            sum += self.leaf_with_coin(b, i, f, &data.x[i]).mortality;
                            count += 1;
                        }
                    }
                    (count > 0).then(|| sum / count as f64)
                });
                let err = harrell_cindex(&data.time, &data.event, &mort).map_or(0.5, |c| 1.0 - c);
                err - base
            })
            .collect();
        let max = imp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max > 0.0 {
            imp.iter_mut().for_each(|v| *v /= max);
        }
        imp
    }
}

/// Harrell's concordance for risk scores (higher = earlier event). Pairs
/// are comparable when the shorter time is an event; score ties count 0.5.
pub fn harrell_cindex(time: &[f64], event: &[bool], risk: &[Option<f64>]) -> Option<f64> {
    let idx: Vec<usize> = (0..time.len()).filter(|&i| risk[i].is_some()).collect();
    let counts = par::map_slice(&idx, |&i| {
        let mut conc = 0u64;
        let mut pairs = 0u64;
        if !event[i] {
            return (0, 0);
        }
        let ri = risk[i].expect("filtered");
        for &j in &idx {
            if time[i] < time[j] {
                let rj = risk[j].expect("filtered");
                pairs += 2;
                conc += if ri > rj {
                    2
                } else if ri == rj {
                    1
                } else {
                    0
                };
            }
        }
        (conc, pairs)
    });
    let (conc, pairs) = counts.iter().fold((0u64, 0u64), |a, b| (a.0 + b.0, a.1 + b.1));
    (pairs > 0).then(|| conc as f64 / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Per-event-time 2x2 table evaluation.
    fn brute_logrank(left: &[(f64, bool)], right: &[(f64, bool)]) -> f64 {
        let mut ts: Vec<f64> = left.iter().chain(right).filter(|a| a.1).map(|a| a.0).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let (mut o_minus_e, mut v) = (0.0, 0.0);
        for t in ts {
            let n1 = left.iter().filter(|a| a.0 >= t).count() as f64;
            let n2 = right.iter().filter(|a| a.0 >= t).count() as f64;
            let d1 = left.iter().filter(|a| a.0 == t && a.1).count() as f64;
            let d2 = right.iter().filter(|a| a.0 == t && a.1).count() as f64;
            let (n, d) = (n1 + n2, d1 + d2);
            o_minus_e += d1 - n1 * d / n;
            if n > 1.0 {
                v += n1 * n2 * d * (n - d) / (n * n * (n - 1.0));
            }
        }
        if v > 0.0 {
            o_minus_e.abs() / v.sqrt()
        } else {
            0.0
        }
    }

    #[test]
    fn logrank_matches_tables() {
        let left: Vec<(f64, bool)> = (0..10).map(|_| (1.0, true)).collect();
        let right: Vec<(f64, bool)> = (0..10).map(|_| (100.0, true)).collect();
        let s = logrank_score(&left, &right);
        assert!((s - brute_logrank(&left, &right)).abs() < 1e-10);
        assert!((s - logrank_score(&right, &left)).abs() < 1e-12);
        assert_eq!(logrank_score(&left, &left), 0.0);

        let mut rng = keyed(3, 0, 0);
        for _ in 0..50 {
            let gen = |rng: &mut crate::rng::Rng, k| -> Vec<(f64, bool)> {
                (0..k).map(|_| (rng.random_range(1..30) as f64, rng.random::<f64>() < 0.7)).collect()
            };
            let (a, b) = (gen(&mut rng, 25), gen(&mut rng, 17));
            assert!((logrank_score(&a, &b) - brute_logrank(&a, &b)).abs() < 1e-10);
        }
    }

    fn separable(n: usize, seed: u64) -> SurvData {
        let mut rng = keyed(seed, 0, 0);
        let mut x = Vec::new();
        let mut time = Vec::new();
        for i in 0..n {
            let flag = (i % 2) as f64;
            let noise: f64 = rng.random();
            time.push(if flag == 1.0 { 10.0 } else { 200.0 });
            x.push(vec![flag, noise]);
        }
        SurvData::new(x, time, vec![true; n]).unwrap()
    }

    #[test]
    fn separable_feature_dominates() {
        let d = separable(300, 1);
        let f = grow_forest(&d, &ForestParams { n_trees: 50, seed: 2, ..Default::default() }).unwrap();
        assert!(f.oob_cindex(&d).unwrap() > 0.95);
        for t in &f.trees {
            assert!(matches!(t.nodes[0], Node::Split { feature: 0, .. }));
        }
        let imp = f.permutation_importance(&d);
        assert_eq!(imp[0], 1.0);
        assert!(imp[1] < 1.0);
    }

    #[test]
    fn single_leaf_forest_is_nelson_aalen() {
        let d = separable(40, 3);
        let params = ForestParams { n_trees: 5, min_leaf: 40, seed: 1, ..Default::default() };
        let f = grow_forest(&d, &params).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 300.0).unwrap();
        for t in &f.trees {
            assert_eq!(t.nodes.len(), 1);
        }
        // B = 1: the prediction is exactly that tree's leaf curve.
        let one = Forest { trees: vec![f.trees[0].clone()], ..f.clone() };
        let leaf = one.trees[0].leaf_for(&d.x[0]).clone();
        let c = one.predict(&d.x[0], &g).unwrap();
        for k in 0..g.len() - 1 {
            let t = k as f64;
            assert!((c.survival(t) - (-leaf.chf_at(t)).exp()).abs() < 1e-12);
        }
        let ens = f.cumulative_hazard(&d.x[0], &g);
        for (k, h) in ens.iter().enumerate() {
            let mean: f64 = f.trees.iter().map(|t| t.leaf_for(&d.x[0]).chf_at(k as f64)).sum::<f64>() / 5.0;
            assert!((h - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_leaves_respect_min_size() {
        let d = separable(200, 4);
        let p = ForestParams { n_trees: 8, seed: 9, ..Default::default() };
        let a = grow_forest(&d, &p).unwrap();
        let b = grow_forest(&d, &p).unwrap();
        assert_eq!(a, b);
        for t in &a.trees {
            for n in &t.nodes {
                if let Node::Leaf(l) = n {
                    assert!(l.size >= p.min_leaf);
                    assert!(l.chf.windows(2).all(|w| w[0] <= w[1]));
                }
            }
        }
    }

    #[test]
    fn oob_fraction_near_inverse_e() {
        let d = separable(600, 5);
        let f = grow_forest(&d, &ForestParams { n_trees: 20, seed: 3, ..Default::default() }).unwrap();
        let mean = f.trees.iter().map(SurvTree::oob_fraction).sum::<f64>() / 20.0;
        assert!((0.36..=0.38).contains(&mean), "{mean}");
        let imp = f.permutation_importance(&d);
        assert_eq!(imp.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }

    #[test]
    fn unused_feature_has_zero_importance() {
        let mut d = separable(200, 6);
        for r in d.x.iter_mut() {
            r.push(1.0);
        }
        let f = grow_forest(&d, &ForestParams { n_trees: 10, seed: 1, ..Default::default() }).unwrap();
        assert_eq!(f.permutation_importance(&d)[2], 0.0);
    }

    fn arb_group(max: usize) -> impl Strategy<Value = Vec<(f64, bool)>> {
        proptest::collection::vec((1u32..30, proptest::bool::weighted(0.7)).prop_map(|(t, e)| (t as f64, e)), 1..max)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn logrank_is_the_contingency_statistic(a in arb_group(40), b in arb_group(40)) {
            let s = logrank_score(&a, &b);
            prop_assert!((s - brute_logrank(&a, &b)).abs() < 1e-10);
            prop_assert!((s - logrank_score(&b, &a)).abs() < 1e-12);
        }

        #[test]
        fn ensemble_curve_is_mean_leaf_hazard(seed in 0u64..1000, n_trees in 1usize..6) {
            let mut rng = keyed(seed, 7, 0);
            let n = 80;
            let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
            let time: Vec<f64> = x.iter().map(|r| (5.0 + 100.0 * r[0] + 20.0 * rng.random::<f64>()).round()).collect();
            let event: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.8).collect();
            let d = SurvData::new(x, time, event).unwrap();
            let f = grow_forest(&d, &ForestParams { n_trees, min_leaf: 5, seed, ..Default::default() }).unwrap();
            let g = TimeGrid::new(0.0, 1.0, 150.0).unwrap();
            let q = [rng.random::<f64>(), rng.random::<f64>()];
            let c = f.predict(&q, &g).unwrap();
            for k in 0..g.len() - 1 {
                let t = k as f64;
                let mean = f.trees.iter().map(|tr| tr.leaf_for(&q).chf_at(t)).sum::<f64>() / n_trees as f64;
                prop_assert!((c.survival(t) - (-mean).exp()).abs() < 1e-12);
            }
        }
    }
}
