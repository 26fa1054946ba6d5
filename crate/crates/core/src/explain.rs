//! Shapley-value attribution of black-box, multi-output predictors.
//!
//! "Missing" features take their values from a background dataset and the
//! model output is averaged over its rows. Features can be toggled one
//! column at a time or in blocks (one-hot fields, residual channels).

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::par;
use crate::rng::{keyed, mix};

/// Largest player count accepted by exact enumeration.
pub const MAX_EXACT_PLAYERS: usize = 12;

/// A set of input columns switched on and off together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Player {
    pub name: String,
    pub columns: Vec<usize>,
}

/// One player per column.
pub fn flat_players(names: &[String]) -> Vec<Player> {
    names.iter().enumerate().map(|(i, n)| Player { name: n.clone(), columns: vec![i] }).collect()
}

/// One player per named column range.
pub fn grouped_players(groups: &[(String, Range<usize>)]) -> Vec<Player> {
    groups.iter().map(|(n, r)| Player { name: n.clone(), columns: r.clone().collect() }).collect()
}

/// Attribution of one output of the model at one query point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub query: usize,
    pub output: usize,
    /// Mean model output over the background.
    pub base: f64,
    /// Model output at the query.
    pub value: f64,
    pub names: Vec<String>,
    pub phi: Vec<f64>,
    /// Query value for each player; the hot offset for multi-column players.
    pub shown: Vec<f64>,
}

impl Attribution {
    /// `base + Σ phi - value`.
    pub fn residual(&self) -> f64 {
        self.base + self.phi.iter().sum::<f64>() - self.value
    }
}

/// Batched model: one output vector per input row.
pub trait Model: Sync {
    fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

impl<F> Model for F
where
    F: Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>> + Sync,
{
    fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self(rows)
    }
}

fn check_inputs(x: &[f64], background: &[Vec<f64>], players: &[Player]) -> Result<()> {
    if background.is_empty() {
        return Err(Error::Empty("background".into()));
    }
    if let Some(b) = background.iter().find(|b| b.len() != x.len()) {
        return Err(Error::Shape(format!("background row has {} columns, query {}", b.len(), x.len())));
    }
    let mut seen = vec![false; x.len()];
    for p in players {
        for &c in &p.columns {
            if c >= x.len() || seen[c] {
                return Err(Error::Shape(format!("player `{}` column {c} out of range or repeated", p.name)));
            }
            seen[c] = true;
        }
    }
    Ok(())
}

/// Mean output over the background with the players in `on` taken from `x`.
fn coalition_value(model: &dyn Model, x: &[f64], background: &[Vec<f64>], players: &[Player], on: &[bool]) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = background
        .iter()
        .map(|b| {
            let mut r = b.clone();
            for (p, _) in players.iter().zip(on).filter(|(_, &o)| o) {
                for &c in &p.columns {
                    r[c] = x[c];
                }
            }
            r
        })
        .collect();
    let out = model.predict(&rows)?;
    let width = out.first().map_or(0, Vec::len);
    if out.len() != rows.len() || out.iter().any(|o| o.len() != width) {
        return Err(Error::Shape("model returned ragged output".into()));
    }
    let mut mean = vec![0.0; width];
    for k in 0..width {
        let col: Vec<f64> = out.iter().map(|o| o[k]).collect();
        mean[k] = par::pairwise_sum(&col) / col.len() as f64;
    }
    Ok(mean)
}

fn shown(x: &[f64], players: &[Player]) -> Vec<f64> {
    players
        .iter()
        .map(|p| match p.columns.as_slice() {
            [c] => x[*c],
            cols => cols
                .iter()
                .enumerate()
                .max_by(|a, b| x[*a.1].total_cmp(&x[*b.1]).then(b.0.cmp(&a.0)))
                .map_or(f64::NAN, |(k, _)| k as f64),
        })
        .collect()
}

fn package(query: usize, outputs: &[usize], base: &[f64], value: &[f64], players: &[Player], phi: &[Vec<f64>], x: &[f64]) -> Result<Vec<Attribution>> {
    let names: Vec<String> = players.iter().map(|p| p.name.clone()).collect();
    let shown = shown(x, players);
    outputs
        .iter()
        .map(|&o| {
            if o >= value.len() {
                return Err(Error::Shape(format!("output {o} out of {} outputs", value.len())));
            }
            Ok(Attribution {
                query,
                output: o,
                base: base[o],
                value: value[o],
                names: names.clone(),
                phi: phi.iter().map(|p| p[o]).collect(),
                shown: shown.clone(),
            })
        })
        .collect()
}

/// Exact Shapley values by enumerating every coalition of players.
pub fn shap_exact(
    model: &dyn Model,
    query: usize,
    x: &[f64],
    background: &[Vec<f64>],
    players: &[Player],
    outputs: &[usize],
) -> Result<Vec<Attribution>> {
    check_inputs(x, background, players)?;
    let m = players.len();
    if m > MAX_EXACT_PLAYERS {
        return Err(Error::Refused(format!(
            "{m} players exceed the exact limit of {MAX_EXACT_PLAYERS}; use permutation sampling"
        )));
    }
    let values = par::map_range(1 << m, |mask| {
        let on: Vec<bool> = (0..m).map(|i| mask >> i & 1 == 1).collect();
        coalition_value(model, x, background, players, &on)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let width = values[0].len();
    // weight[s] = s!(m-s-1)!/m!
    let weight: Vec<f64> = (0..m)
        .map(|s| {
            let mut w = 1.0 / m as f64;
            for k in 1..=s {
                w *= k as f64 / (m - k) as f64;
            }
            w
        })
        .collect();
    let mut phi = vec![vec![0.0; width]; m];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        for mask in 0..(1usize << m) {
            if mask >> i & 1 == 1 {
                continue;
            }
            let w = weight[mask.count_ones() as usize];
            let with = &values[mask | 1 << i];
            for k in 0..width {
                phi_i[k] += w * (with[k] - values[mask][k]);
            }
        }
    }
    package(query, outputs, &values[0], &values[(1 << m) - 1], players, &phi, x)
}

/// Mean model output over the background rows.
pub fn background_mean(model: &dyn Model, background: &[Vec<f64>]) -> Result<Vec<f64>> {
    if background.is_empty() {
        return Err(Error::Empty("background dataset".into()));
    }
    let m = background[0].len();
    coalition_value(model, &vec![0.0; m], background, &[], &[])
}

fn hybrid(x: &[f64], z: &[f64], players: &[Player], on: &[bool]) -> Vec<f64> {
    let mut r = z.to_vec();
    for (p, _) in players.iter().zip(on).filter(|(_, &o)| o) {
        for &c in &p.columns {
            r[c] = x[c];
        }
    }
    r
}

/// Shapley values estimated from `n_permutations` random player orderings,
/// each walked forwards and backwards. Coalition values along an ordering
/// average over `draws` background rows sampled without replacement (all
/// rows when the background is no larger). The base value is the full
/// background mean, so the local-accuracy residual is the sampling error of
/// the drawn rows and vanishes when every row is used.
#[allow(clippy::too_many_arguments)]
pub fn shap_permutation(
    model: &dyn Model,
    query: usize,
    x: &[f64],
    background: &[Vec<f64>],
    players: &[Player],
    outputs: &[usize],
    n_permutations: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<Attribution>> {
    check_inputs(x, background, players)?;
    let base = background_mean(model, background)?;
    permutation_with_base(model, query, x, background, players, outputs, (n_permutations, draws), seed, &base)
}

#[allow(clippy::too_many_arguments)]
fn permutation_with_base(
    model: &dyn Model,
    query: usize,
    x: &[f64],
    background: &[Vec<f64>],
    players: &[Player],
    outputs: &[usize],
    (n_permutations, draws): (usize, usize),
    seed: u64,
    base: &[f64],
) -> Result<Vec<Attribution>> {
    if n_permutations < 2 {
        return domain("at least two permutations are required");
    }
    if players.is_empty() {
        return domain("no players to attribute");
    }
    if draws == 0 {
        return domain("at least one background draw is required");
    }
    let m = players.len();
    let r = draws.min(background.len());
    // Per ordering and drawn row: the row itself, the forward walk's m
    // coalitions, then the m - 1 interior coalitions of the backward walk.
    let stride = 2 * m;
    let mut rows = Vec::with_capacity(n_permutations * r * stride);
    let mut orders = Vec::with_capacity(n_permutations);
    for k in 0..n_permutations {
        let mut rng = keyed(seed, query as u64, k as u64);
        let picked: Vec<usize> = if r == background.len() {
            (0..r).collect()
        } else {
            rand::seq::index::sample(&mut rng, background.len(), r).into_vec()
        };
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        for &i in &picked {
            let z = &background[i];
            rows.push(z.clone());
            let mut on = vec![false; m];
            for &p in &order {
                on[p] = true;
                rows.push(hybrid(x, z, players, &on));
            }
            let mut on = vec![false; m];
            for &p in order.iter().rev().take(m - 1) {
                on[p] = true;
                rows.push(hybrid(x, z, players, &on));
            }
        }
        orders.push(order);
    }
    let out = model.predict(&rows)?;
    let width = base.len();
    if out.len() != rows.len() || out.iter().any(|o| o.len() != width) {
        return Err(Error::Shape("model returned ragged output".into()));
    }
    let mut phi = vec![vec![0.0; width]; m];
    for (k, order) in orders.iter().enumerate() {
        for j in 0..r {
            let at = (k * r + j) * stride;
            let blk = &out[at..at + stride];
            let (empty, fwd, bwd) = (&blk[0], &blk[1..=m], &blk[m + 1..]);
            let full = &fwd[m - 1];
            for (step, &p) in order.iter().enumerate() {
                let prev = if step == 0 { empty } else { &fwd[step - 1] };
                for o in 0..width {
                    phi[p][o] += fwd[step][o] - prev[o];
                }
            }
            for (step, &p) in order.iter().rev().enumerate() {
                let prev = if step == 0 { empty } else { &bwd[step - 1] };
                let cur = if step + 1 == m { full } else { &bwd[step] };
                for o in 0..width {
                    phi[p][o] += cur[o] - prev[o];
                }
            }
        }
    }
    let passes = (2 * n_permutations * r) as f64;
    phi.iter_mut().flatten().for_each(|v| *v /= passes);
    let value = model.predict(&[x.to_vec()])?.pop().ok_or_else(|| Error::Shape("model returned no output".into()))?;
    package(query, outputs, base, &value, players, &phi, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    Exact,
    Permutation { n_permutations: usize, draws: usize },
}

/// Attribute every query, in parallel across queries.
pub fn explain_queries(
    model: &dyn Model,
    queries: &[Vec<f64>],
    background: &[Vec<f64>],
    players: &[Player],
    outputs: &[usize],
    method: Method,
    seed: u64,
) -> Result<Vec<Attribution>> {
    let base = match method {
        Method::Exact => Vec::new(),
        Method::Permutation { .. } => background_mean(model, background)?,
    };
    let per = par::map_range(queries.len(), |q| match method {
        Method::Exact => shap_exact(model, q, &queries[q], background, players, outputs),
        Method::Permutation { n_permutations, draws } => {
            check_inputs(&queries[q], background, players)?;
            permutation_with_base(model, q, &queries[q], background, players, outputs, (n_permutations, draws), mix(seed, &[q as u64]), &base)
        }
    });
    Ok(per.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

/// Sum per-column attributions over named column blocks. Columns outside
/// every block keep their own entry.
pub fn group_categorical(attr: &Attribution, blocks: &[(String, Range<usize>)]) -> Attribution {
    let mut names = Vec::new();
    let mut phi = Vec::new();
    let mut shown = Vec::new();
    let mut c = 0;
    while c < attr.phi.len() {
        match blocks.iter().find(|(_, r)| r.start == c && r.len() > 1 && r.end <= attr.phi.len()) {
            Some((n, r)) => {
                names.push(n.clone());
                phi.push(attr.phi[r.clone()].iter().sum());
                let hot = (r.clone()).max_by(|&a, &b| attr.shown[a].total_cmp(&attr.shown[b]).then(b.cmp(&a)));
                shown.push(hot.map_or(f64::NAN, |h| (h - r.start) as f64));
                c = r.end;
            }
            None => {
                names.push(attr.names[c].clone());
                phi.push(attr.phi[c]);
                shown.push(attr.shown[c]);
                c += 1;
            }
        }
    }
    Attribution { names, phi, shown, ..attr.clone() }
}

/// Mean |φ| per player and output, normalized so each output's largest
/// importance is 1, with 1-based ranks (ties broken by player order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub names: Vec<String>,
    pub outputs: Vec<usize>,
    pub importance: Vec<Vec<f64>>,
    pub ranks: Vec<Vec<usize>>,
}

pub fn importance_table(attrs: &[Attribution]) -> Result<ImportanceTable> {
    let first = attrs.first().ok_or_else(|| Error::Empty("no attributions".into()))?;
    let names = first.names.clone();
    let mut outputs: Vec<usize> = attrs.iter().map(|a| a.output).collect();
    outputs.sort_unstable();
    outputs.dedup();
    let mut importance = Vec::new();
    let mut ranks = Vec::new();
    for &o in &outputs {
        let rows: Vec<&Attribution> = attrs.iter().filter(|a| a.output == o).collect();
        if rows.iter().any(|a| a.names != names) {
            return Err(Error::Shape("attributions disagree on players".into()));
        }
        let mut imp: Vec<f64> = (0..names.len())
            .map(|p| {
                let terms: Vec<f64> = rows.iter().map(|a| a.phi[p].abs()).collect();
                par::pairwise_sum(&terms) / terms.len() as f64
            })
            .collect();
        let max = imp.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            imp.iter_mut().for_each(|v| *v /= max);
        }
        let mut order: Vec<usize> = (0..names.len()).collect();
        order.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
        let mut rank = vec![0; names.len()];
        for (r, &p) in order.iter().enumerate() {
            rank[p] = r + 1;
        }
        importance.push(imp);
        ranks.push(rank);
    }
    Ok(ImportanceTable { names, outputs, importance, ranks })
}

impl ImportanceTable {
    /// Long layout: output, feature, importance, rank.
    pub fn write_csv(&self, path: &Path, output_label: impl Fn(usize) -> String) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["output", "feature", "importance", "rank"])?;
        for (k, &o) in self.outputs.iter().enumerate() {
            for (p, n) in self.names.iter().enumerate() {
                w.write_record([output_label(o), n.clone(), self.importance[k][p].to_string(), self.ranks[k][p].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Long layout: query, output, feature, feature value, phi, base, value.
pub fn write_attributions_csv(attrs: &[Attribution], path: &Path, output_label: impl Fn(usize) -> String) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["query", "output", "feature", "feature_value", "phi", "base", "value"])?;
    for a in attrs {
        for p in 0..a.phi.len() {
            w.write_record([
                a.query.to_string(),
                output_label(a.output),
                a.names[p].clone(),
                a.shown[p].to_string(),
                a.phi[p].to_string(),
                a.base.to_string(),
                a.value.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `k` distinct indices from `0..n` (all of them if `k >= n`), chosen by seed.
pub fn subsample(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(&mut keyed(seed, 0x5b, 0), n, k).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn names(m: usize) -> Vec<String> {
        (0..m).map(|i| format!("x{i}")).collect()
    }

    fn linear(w: Vec<f64>) -> impl Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>> + Sync {
        move |rows| Ok(rows.iter().map(|r| vec![r.iter().zip(&w).map(|(a, b)| a * b).sum()]).collect())
    }

    /// Eight inputs with pairwise and threshold interactions; two outputs.
    fn eight(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(rows
            .iter()
            .map(|r| {
                let a = 1.5 * r[0] - r[1] + r[2] * r[3] + (r[4] > 0.2) as u8 as f64 * r[5] + 0.5 * r[6] * r[6] - 0.3 * r[7];
                vec![a, (r[0] + r[7]).tanh()]
            })
            .collect())
    }

    fn output_range(outs: &[Vec<f64>], o: usize) -> f64 {
        let v = outs.iter().map(|r| r[o]);
        v.clone().fold(f64::MIN, f64::max) - v.fold(f64::MAX, f64::min)
    }

    fn random_rows(n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = keyed(seed, 1, 1);
        (0..n).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn linear_model_with_zero_background() {
        let w = vec![0.5, -2.0, 3.0, 0.0];
        let x = vec![1.0, 2.0, -1.0, 4.0];
        let bg = vec![vec![1.0, -1.0, 2.0, 0.5], vec![-1.0, 1.0, -2.0, -0.5]];
        let a = &shap_exact(&linear(w.clone()), 0, &x, &bg, &flat_players(&names(4)), &[0]).unwrap()[0];
        for k in 0..4 {
            assert!((a.phi[k] - w[k] * x[k]).abs() < 1e-12);
        }
        assert_eq!(a.phi[3], 0.0);
        assert_eq!(a.base, 0.0);
    }

    #[test]
    fn symmetric_pair() {
        let f = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> { Ok(rows.iter().map(|r| vec![r[0] + r[1]]).collect()) };
        let a = &shap_exact(&f, 0, &[0.7, 0.7], &[vec![0.0, 0.0]], &flat_players(&names(2)), &[0]).unwrap()[0];
        assert!((a.phi[0] - 0.7).abs() < 1e-15 && (a.phi[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn exact_refuses_large_sets() {
        let m = MAX_EXACT_PLAYERS + 1;
        let r = shap_exact(&linear(vec![1.0; m]), 0, &vec![0.0; m], &[vec![0.0; m]], &flat_players(&names(m)), &[0]);
        assert!(matches!(r, Err(Error::Refused(_))));
    }

    #[test]
    fn exact_axioms_on_random_models() {
        let mut rng = keyed(9, 0, 0);
        for trial in 0..100 {
            let m = rng.random_range(2..7);
            let w: Vec<f64> = (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dead = rng.random_range(0..m);
            // quadratic form with one dead input and inputs 0 and 1 exchangeable when dead > 1
            let f = move |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
                Ok(rows
                    .iter()
                    .map(|r| {
                        let mut s = 0.0;
                        for i in 0..m {
                            for j in 0..m {
                                if i != dead && j != dead {
                                    s += w[i * m + j] * r[i] * r[j];
                                }
                            }
                        }
                        vec![s.sin() + s]
                    })
                    .collect())
            };
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bg = random_rows(5, m, trial);
            let a = &shap_exact(&f, 0, &x, &bg, &flat_players(&names(m)), &[0]).unwrap()[0];
            assert!(a.residual().abs() < 1e-8, "local accuracy {}", a.residual());
            assert!(a.phi[dead].abs() < 1e-12, "dummy {}", a.phi[dead]);
        }
    }

    #[test]
    fn exact_symmetry_for_exchangeable_inputs() {
        let f = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
            Ok(rows.iter().map(|r| vec![(r[0] * r[1]).exp() + r[0] + r[1] + r[2] * r[0] * r[1]]).collect())
        };
        let x = [0.4, 0.4, -0.9];
        let bg = vec![vec![0.1, 0.1, 0.3], vec![-0.5, -0.5, 0.2], vec![0.3, 0.3, -0.1]];
        let a = &shap_exact(&f, 0, &x, &bg, &flat_players(&names(3)), &[0]).unwrap()[0];
        assert!((a.phi[0] - a.phi[1]).abs() < 1e-10);
    }

    #[test]
    fn permutation_close_to_exact() {
        let p = flat_players(&names(8));
        let bg = random_rows(20, 8, 2);
        let x = vec![0.9, -0.8, 0.7, 0.6, 0.5, -0.9, 0.8, 0.4];
        let exact = shap_exact(&eight, 0, &x, &bg, &p, &[0, 1]).unwrap();
        let approx = shap_permutation(&eight, 0, &x, &bg, &p, &[0, 1], 500, 1, 4).unwrap();
        for (e, a) in exact.iter().zip(&approx) {
            let hi = e.phi.iter().copied().fold(f64::MIN, f64::max);
            let lo = e.phi.iter().copied().fold(f64::MAX, f64::min);
            let err = e.phi.iter().zip(&a.phi).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(err < 0.05 * (hi - lo), "{err} vs range {}", hi - lo);
            assert_eq!(e.base, a.base);
        }
    }

    #[test]
    fn permutation_is_unbiased() {
        let p = flat_players(&names(8));
        let bg = random_rows(10, 8, 3);
        let x = vec![0.9, -0.8, 0.7, 0.6, 0.5, -0.9, 0.8, 0.4];
        let exact = &shap_exact(&eight, 0, &x, &bg, &p, &[0]).unwrap()[0];
        let runs: Vec<Vec<f64>> = (0..50)
            .map(|s| shap_permutation(&eight, 0, &x, &bg, &p, &[0], 4, 1, 100 + s).unwrap()[0].phi.clone())
            .collect();
        for k in 0..8 {
            let v: Vec<f64> = runs.iter().map(|r| r[k]).collect();
            let mean = v.iter().sum::<f64>() / 50.0;
            let sd = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 49.0).sqrt();
            let se = sd / 50f64.sqrt();
            assert!((mean - exact.phi[k]).abs() <= 2.0 * se + 1e-12, "feature {k}: {mean} vs {} (se {se})", exact.phi[k]);
        }
    }

    #[test]
    fn query_equal_to_background_gets_zero() {
        let x = vec![0.3, -0.2, 0.1, 0.5, 0.0, 0.2, -0.4, 0.9];
        let a = &shap_permutation(&eight, 0, &x, &[x.clone(), x.clone()], &flat_players(&names(8)), &[0], 3, 1, 1).unwrap()[0];
        assert!(a.phi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_requires_two() {
        let r = shap_permutation(&eight, 0, &[0.0; 8], &[vec![0.0; 8]], &flat_players(&names(8)), &[0], 1, 1, 0);
        assert!(r.is_err());
        let r = shap_permutation(&eight, 0, &[0.0; 8], &[vec![0.0; 8]], &flat_players(&names(8)), &[0], 2, 0, 0);
        assert!(r.is_err());
    }

    #[test]
    fn grouped_toggling_keeps_local_accuracy() {
        let players = grouped_players(&[("a".into(), 0..3), ("b".into(), 3..4), ("c".into(), 4..8)]);
        let bg = random_rows(6, 8, 5);
        let x = vec![1.0, 0.0, 0.0, 0.6, 0.5, -0.9, 0.8, 0.4];
        let e = &shap_exact(&eight, 0, &x, &bg, &players, &[0]).unwrap()[0];
        let p = &shap_permutation(&eight, 0, &x, &bg, &players, &[0], 6, 6, 2).unwrap()[0];
        assert!(e.residual().abs() < 1e-10);
        assert!(p.residual().abs() < 1e-10);
        let bg = random_rows(400, 8, 6);
        let p = &shap_permutation(&eight, 0, &x, &bg, &players, &[0], 10, 16, 3).unwrap()[0];
        assert!(p.residual().abs() < 0.02 * output_range(&eight(&bg).unwrap(), 0), "{}", p.residual());
        assert_eq!(e.shown[0], 0.0);
    }

    #[test]
    fn grouping_sums_blocks() {
        let a = Attribution {
            query: 0,
            output: 0,
            base: 0.0,
            value: 0.08 + 0.5,
            names: names(5),
            phi: vec![0.1, -0.02, 0.0, 0.0, 0.5],
            shown: vec![0.0, 1.0, 0.0, 0.0, 2.5],
        };
        let g = group_categorical(&a, &[("kind".into(), 0..4), ("len".into(), 4..5)]);
        assert_eq!(g.names, vec!["kind", "x4"]);
        assert!((g.phi[0] - 0.08).abs() < 1e-15);
        assert_eq!(g.shown, vec![1.0, 2.5]);
        assert_eq!(g.phi.iter().sum::<f64>(), a.phi.iter().sum::<f64>());
        let single = group_categorical(&a, &[("len".into(), 4..5)]);
        assert_eq!(single.phi, a.phi);
    }

    #[test]
    fn importance_normalized_and_ranked() {
        let mk = |q, phi: Vec<f64>| Attribution {
            query: q,
            output: 2,
            base: 0.0,
            value: 0.0,
            names: names(3),
            shown: vec![0.0; 3],
            phi,
        };
        let t = importance_table(&[mk(0, vec![0.2, -0.4, 0.0]), mk(1, vec![-0.2, 0.0, 0.0])]).unwrap();
        assert_eq!(t.outputs, vec![2]);
        assert_eq!(t.importance[0], vec![1.0, 1.0, 0.0]);
        assert_eq!(t.ranks[0], vec![1, 2, 3]);
        let one = importance_table(&[Attribution { names: names(1), phi: vec![-3.0], shown: vec![0.0], ..mk(0, vec![]) }]).unwrap();
        assert_eq!((one.importance[0][0], one.ranks[0][0]), (1.0, 1));
        assert!(importance_table(&[]).is_err());
    }

    #[test]
    fn csv_outputs() {
        let bg = random_rows(4, 8, 1);
        let qs = random_rows(3, 8, 2);
        let attrs = explain_queries(&eight, &qs, &bg, &flat_players(&names(8)), &[0, 1], Method::Exact, 0).unwrap();
        assert_eq!(attrs.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        write_attributions_csv(&attrs, &dir.path().join("a.csv"), |o| o.to_string()).unwrap();
        importance_table(&attrs).unwrap().write_csv(&dir.path().join("i.csv"), |o| o.to_string()).unwrap();
        let a = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(a.lines().count(), 1 + 6 * 8);
    }

    #[test]
    fn subsample_is_deterministic() {
        assert_eq!(subsample(100, 10, 4), subsample(100, 10, 4));
        assert_eq!(subsample(5, 10, 4), vec![0, 1, 2, 3, 4]);
        let s = subsample(100, 10, 4);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn exact_axioms_hold_for_random_quadratics(seed in any::<u64>(), m in 2usize..7) {
            let mut rng = keyed(seed, 2, 0);
            let w: Vec<f64> = (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dead = rng.random_range(0..m);
            let f = move |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
                Ok(rows
                    .iter()
                    .map(|r| {
                        let mut s = 0.0;
                        for i in (0..m).filter(|&i| i != dead) {
                            for j in (0..m).filter(|&j| j != dead) {
                                s += w[i * m + j] * r[i] * r[j];
                            }
                        }
                        vec![s.cos(), s]
                    })
                    .collect())
            };
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bg = random_rows(4, m, seed);
            for a in shap_exact(&f, 0, &x, &bg, &flat_players(&names(m)), &[0, 1]).unwrap() {
                prop_assert!(a.residual().abs() < 1e-8);
                prop_assert!(a.phi[dead].abs() < 1e-12);
            }
            let split = rng.random_range(1..m);
            let groups = vec![("a".to_string(), 0..split), ("b".to_string(), split..m)];
            let flat = &shap_exact(&f, 0, &x, &bg, &flat_players(&names(m)), &[0]).unwrap()[0];
            let grouped = group_categorical(flat, &groups);
            prop_assert!((grouped.phi.iter().sum::<f64>() - flat.phi.iter().sum::<f64>()).abs() < 1e-12);
        }
    }
}
