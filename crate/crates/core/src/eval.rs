//! Discrimination, calibration and point-error metrics for static and
//! dynamic duration predictions.
//!
//! All durations are absolute minutes since incident start. Incidents whose
//! duration is censored only take part where their outcome is known.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curve::SurvivalCurve;
use crate::error::{Error, Result};
use crate::par;

/// A metric value with the number of pairs or rows behind it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub support: usize,
}

fn undefined<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Undefined(msg.into()))
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(Error::Shape(format!("length mismatch: {a}, {b}, {c}")));
    }
    Ok(())
}

/// Doubled concordance count: 2 per concordant pair, 1 per tie.
fn concordance(
    n: usize,
    comparable: impl Fn(usize, usize) -> bool + Sync,
    first: impl Fn(usize, usize) -> (f64, f64) + Sync,
) -> (u64, u64) {
    let rows = par::map_range(n, |i| {
        let (mut hits, mut pairs) = (0u64, 0u64);
        for j in 0..n {
            if i == j || !comparable(i, j) {
                continue;
            }
            pairs += 1;
            let (fi, fj) = first(i, j);
            if fi > fj {
                hits += 2;
            } else if fi == fj {
                hits += 1;
            }
        }
        (hits, pairs)
    });
    rows.into_iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
}

/// Time-dependent concordance over pairs `τ_i < τ_j` with `i` an observed end:
/// the earlier incident should carry more mass by its own end time.
pub fn cindex_static(curves: &[SurvivalCurve], durations: &[f64], events: &[bool]) -> Result<Score> {
    check_lengths(curves.len(), durations.len(), events.len())?;
    let cdfs: Vec<Vec<f64>> = par::map_slice(curves, |c| c.cdf_values());
    let at = |j: usize, t: f64| -> f64 {
        match curves[j].grid().index_at_or_before(t) {
            None => 0.0,
            Some(k) if k + 1 == cdfs[j].len() => 1.0,
            Some(k) => cdfs[j][k],
        }
    };
    let (hits, pairs) = concordance(
        curves.len(),
        |i, j| events[i] && durations[i] < durations[j],
        |i, j| (at(i, durations[i]), at(j, durations[i])),
    );
    if pairs == 0 {
        return undefined("no comparable pairs");
    }
    Ok(Score { value: hits as f64 / (2 * pairs) as f64, support: pairs as usize })
}

/// Concordance at one prediction time and horizon. `scores[i]` is the
/// predicted probability that incident `i` ends by `t + dt`; incidents with
/// `τ <= t` are ignored.
pub fn cindex_dynamic(scores: &[f64], durations: &[f64], events: &[bool], t: f64, dt: f64) -> Result<Score> {
    check_lengths(scores.len(), durations.len(), events.len())?;
    let end = t + dt;
    let (hits, pairs) = concordance(
        scores.len(),
        |i, j| {
            durations[i] > t && durations[j] > t && events[i] && durations[i] < durations[j] && durations[i] < end
        },
        |i, j| (scores[i], scores[j]),
    );
    if pairs == 0 {
        return undefined(format!("no comparable pairs at t={t}, dt={dt}"));
    }
    Ok(Score { value: hits as f64 / (2 * pairs) as f64, support: pairs as usize })
}

/// Whether the outcome by `end` is known, and if so whether the incident ended.
fn label(duration: f64, event: bool, end: f64) -> Option<bool> {
    if duration < end {
        event.then_some(true)
    } else {
        Some(false)
    }
}

/// Mean squared error of `scores` against "ended before `t + dt`" over
/// incidents active at `t`.
pub fn brier(scores: &[f64], durations: &[f64], events: &[bool], t: f64, dt: f64) -> Result<Score> {
    check_lengths(scores.len(), durations.len(), events.len())?;
    let end = t + dt;
    let terms: Vec<f64> = (0..scores.len())
        .filter(|&i| durations[i] > t)
        .filter_map(|i| {
            let y = label(durations[i], events[i], end)?;
            Some((f64::from(u8::from(y)) - scores[i]).powi(2))
        })
        .collect();
    if terms.is_empty() {
        return Err(Error::Empty(format!("no active incidents at t={t}")));
    }
    Ok(Score { value: par::pairwise_sum(&terms) / terms.len() as f64, support: terms.len() })
}

/// Area under the ROC curve of `scores` for "ended before `t + dt`" among
/// incidents active at `t`. Tied scores take their midrank.
pub fn auroc_dynamic(scores: &[f64], durations: &[f64], events: &[bool], t: f64, dt: f64) -> Result<Score> {
    check_lengths(scores.len(), durations.len(), events.len())?;
    let end = t + dt;
    let mut rows: Vec<(f64, bool)> = (0..scores.len())
        .filter(|&i| durations[i] > t)
        .filter_map(|i| Some((scores[i], label(durations[i], events[i], end)?)))
        .collect();
    let n_pos = rows.iter().filter(|r| r.1).count();
    let n_neg = rows.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return undefined(format!("single class at t={t}, dt={dt}"));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Ranks are doubled so midranks stay integral.
    let mut rank_sum2 = 0u64;
    let mut k = 0;
    while k < rows.len() {
        let mut e = k;
        while e + 1 < rows.len() && rows[e + 1].0 == rows[k].0 {
            e += 1;
        }
        let mid2 = (k + 1 + e + 1) as u64;
        rank_sum2 += mid2 * rows[k..=e].iter().filter(|r| r.1).count() as u64;
        k = e + 1;
    }
    let (p, q) = (n_pos as u64, n_neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(Score { value: u2 as f64 / (2 * p * q) as f64, support: rows.len() })
}

/// Minimum duration for the point-error metrics.
pub const MIN_POINT_DURATION: f64 = 60.0;

fn eligible(durations: &[f64], events: &[bool]) -> Vec<usize> {
    (0..durations.len()).filter(|&i| events[i] && durations[i] >= MIN_POINT_DURATION).collect()
}

/// Absolute percentage error of a curve's median against the true duration.
/// The curve lives on absolute time, so its median is already `t` plus the
/// median remaining time.
pub fn ape(curve: &SurvivalCurve, duration: f64) -> f64 {
    (curve.median() - duration).abs() / duration * 100.0
}

/// MAPE when predicting at `⌊p·τ/100⌋` for each percentile `p`, over
/// observed incidents lasting at least an hour. `predict(i, t)` returns the
/// curve for incident `i` at time `t`, on absolute time.
pub fn mape_at_percentiles<F>(durations: &[f64], events: &[bool], percentiles: &[f64], predict: F) -> Result<Vec<Score>>
where
    F: Fn(usize, f64) -> Result<SurvivalCurve> + Sync,
{
    check_lengths(durations.len(), events.len(), events.len())?;
    let ids = eligible(durations, events);
    percentiles
        .iter()
        .map(|&p| {
            if ids.is_empty() {
                return undefined("no incidents of at least an hour");
            }
            let errs = par::map_slice(&ids, |&i| {
                let t = (p * durations[i] / 100.0).floor();
                predict(i, t).map(|c| ape(&c, durations[i]))
            })
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
            Ok(Score { value: par::pairwise_sum(&errs) / errs.len() as f64, support: errs.len() })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApePoint {
    pub minute: f64,
    pub mean: f64,
    pub median: f64,
    pub support: usize,
}

/// Mean and median APE at each absolute minute `from, from + step, ...`
/// across incidents still active there.
pub fn ape_per_minute<F>(durations: &[f64], events: &[bool], from: f64, step: f64, predict: F) -> Result<Vec<ApePoint>>
where
    F: Fn(usize, f64) -> Result<SurvivalCurve> + Sync,
{
    check_lengths(durations.len(), events.len(), events.len())?;
    if !(step > 0.0) {
        return crate::error::domain("step must be positive");
    }
    let ids = eligible(durations, events);
    let mut out = Vec::new();
    let mut m = from;
    loop {
        let active: Vec<usize> = ids.iter().copied().filter(|&i| durations[i] > m).collect();
        if active.is_empty() {
            break;
        }
        let mut errs = par::map_slice(&active, |&i| predict(i, m).map(|c| ape(&c, durations[i])))
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
        let mean = par::pairwise_sum(&errs) / errs.len() as f64;
        errs.sort_by(f64::total_cmp);
        let h = errs.len() / 2;
        let median = if errs.len() % 2 == 1 { errs[h] } else { 0.5 * (errs[h - 1] + errs[h]) };
        out.push(ApePoint { minute: m, mean, median, support: errs.len() });
        m += step;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cindex,
    Brier,
    Mape,
    Auroc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cindex => "cindex",
            Metric::Brier => "brier",
            Metric::Mape => "mape",
            Metric::Auroc => "auroc",
        }
    }
}

/// One report cell. `value` is `None` when the metric is undefined there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub model: String,
    pub metric: Metric,
    pub t: f64,
    pub horizon: Option<f64>,
    pub percentile: Option<f64>,
    pub value: Option<f64>,
    pub support: usize,
}

/// Rows are prediction times, columns horizons, plus a mean-over-horizons
/// column taken over the defined cells of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub times: Vec<f64>,
    pub horizons: Vec<f64>,
    pub cells: Vec<Vec<Option<f64>>>,
    pub mean: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub entries: Vec<Entry>,
}

impl EvaluationReport {
    /// Record a metric result; undefined metrics become explicit nulls and
    /// any other error is returned.
    pub fn record(
        &mut self,
        model: &str,
        metric: Metric,
        t: f64,
        horizon: Option<f64>,
        percentile: Option<f64>,
        result: Result<Score>,
    ) -> Result<()> {
        let (value, support) = match result {
            Ok(s) => (Some(s.value), s.support),
            Err(Error::Undefined(_)) | Err(Error::Empty(_)) => (None, 0),
            Err(e) => return Err(e),
        };
        self.entries.push(Entry { model: model.to_string(), metric, t, horizon, percentile, value, support });
        Ok(())
    }

    pub fn merge(&mut self, other: EvaluationReport) {
        self.entries.extend(other.entries);
    }

    pub fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.model) {
                out.push(e.model.clone());
            }
        }
        out
    }

    pub fn find(&self, model: &str, metric: Metric, t: f64, horizon: Option<f64>, percentile: Option<f64>) -> Option<&Entry> {
        self.entries.iter().find(|e| {
            e.model == model && e.metric == metric && e.t == t && e.horizon == horizon && e.percentile == percentile
        })
    }

    /// Horizon-indexed entries for one model and metric, laid out by time.
    pub fn table(&self, model: &str, metric: Metric) -> Table {
        let rows: Vec<&Entry> = self
            .entries
            .iter()
            .filter(|e| e.model == model && e.metric == metric && e.horizon.is_some())
            .collect();
        let mut times: Vec<f64> = Vec::new();
        let mut horizons: Vec<f64> = Vec::new();
        for e in &rows {
            if !times.contains(&e.t) {
                times.push(e.t);
            }
            let h = e.horizon.unwrap_or_default();
            if !horizons.contains(&h) {
                horizons.push(h);
            }
        }
        times.sort_by(f64::total_cmp);
        horizons.sort_by(f64::total_cmp);
        let mut cells = vec![vec![None; horizons.len()]; times.len()];
        for e in rows {
            let r = times.iter().position(|&t| t == e.t).unwrap_or_default();
            let c = horizons.iter().position(|&h| Some(h) == e.horizon).unwrap_or_default();
            cells[r][c] = e.value;
        }
        let mean = cells
            .iter()
            .map(|row| {
                let vals: Vec<f64> = row.iter().flatten().copied().collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Table { times, horizons, cells, mean }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["model", "metric", "t", "horizon", "percentile", "value", "support"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.entries {
            w.write_record([
                e.model.clone(),
                e.metric.name().to_string(),
                e.t.to_string(),
                opt(e.horizon),
                opt(e.percentile),
                opt(e.value),
                e.support.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }

    /// Time-by-horizon layout with a trailing mean column; undefined cells are empty.
    pub fn write_table_csv(&self, model: &str, metric: Metric, path: &Path) -> Result<()> {
        let t = self.table(model, metric);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend(t.horizons.iter().map(|h| h.to_string()));
        header.push("mean".into());
        w.write_record(&header)?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for (r, time) in t.times.iter().enumerate() {
            let mut rec = vec![time.to_string()];
            rec.extend(t.cells[r].iter().map(|&v| fmt(v)));
            rec.push(fmt(t.mean[r]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluate a dynamic model over a grid of prediction times and horizons.
/// `cdf_at(ids, t, h)` returns, for each incident in `ids` (all active at
/// `t`), the predicted probability of ending by `t + h`. Cells the model
/// cannot predict (undefined or empty) are recorded as null.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_dynamic<F>(
    report: &mut EvaluationReport,
    model: &str,
    durations: &[f64],
    events: &[bool],
    times: &[f64],
    horizons: &[f64],
    cdf_at: F,
) -> Result<()>
where
    F: Fn(&[usize], f64, f64) -> Result<Vec<f64>>,
{
    check_lengths(durations.len(), events.len(), events.len())?;
    for &t in times {
        let active: Vec<usize> = (0..durations.len()).filter(|&i| durations[i] > t).collect();
        let d: Vec<f64> = active.iter().map(|&i| durations[i]).collect();
        let e: Vec<bool> = active.iter().map(|&i| events[i]).collect();
        for &h in horizons {
            let s = match cdf_at(&active, t, h) {
                Err(Error::Undefined(m)) | Err(Error::Empty(m)) => {
                    log::info!("{model}: no predictions at t={t}, horizon {h}: {m}");
                    for metric in [Metric::Cindex, Metric::Brier, Metric::Auroc] {
                        report.record(model, metric, t, Some(h), None, undefined(m.clone()))?;
                    }
                    continue;
                }
                other => other?,
            };
            if s.len() != active.len() {
                return Err(Error::Shape(format!("{model}: {} predictions for {} active incidents", s.len(), active.len())));
            }
            report.record(model, Metric::Cindex, t, Some(h), None, cindex_dynamic(&s, &d, &e, t, h))?;
            report.record(model, Metric::Brier, t, Some(h), None, brier(&s, &d, &e, t, h))?;
            report.record(model, Metric::Auroc, t, Some(h), None, auroc_dynamic(&s, &d, &e, t, h))?;
        }
    }
    Ok(())
}

/// MAPE entries at each percentile; undefined percentiles become nulls.
pub fn record_mape<F>(report: &mut EvaluationReport, model: &str, durations: &[f64], events: &[bool], percentiles: &[f64], predict: F) -> Result<()>
where
    F: Fn(usize, f64) -> Result<SurvivalCurve> + Sync,
{
    let ids = eligible(durations, events);
    if ids.is_empty() {
        for &p in percentiles {
            report.record(model, Metric::Mape, 0.0, None, Some(p), undefined("no incidents of at least an hour"))?;
        }
        return Ok(());
    }
    let scores = mape_at_percentiles(durations, events, percentiles, predict)?;
    for (&p, s) in percentiles.iter().zip(scores) {
        report.record(model, Metric::Mape, 0.0, None, Some(p), Ok(s))?;
    }
    Ok(())
}

/// Static evaluation from curves predicted at incident start: overall
/// concordance, Brier at each horizon and MAPE of the median.
pub fn evaluate_static(
    report: &mut EvaluationReport,
    model: &str,
    curves: &[SurvivalCurve],
    durations: &[f64],
    events: &[bool],
    horizons: &[f64],
) -> Result<()> {
    check_lengths(curves.len(), durations.len(), events.len())?;
    report.record(model, Metric::Cindex, 0.0, None, None, cindex_static(curves, durations, events))?;
    for &h in horizons {
        let s: Vec<f64> = curves.iter().map(|c| c.cdf(h)).collect();
        report.record(model, Metric::Brier, 0.0, Some(h), None, brier(&s, durations, events, 0.0, h))?;
    }
    record_mape(report, model, durations, events, &[0.0], |i, _| Ok(curves[i].clone()))
}
