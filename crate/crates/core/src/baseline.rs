//! Robust weekly profiles, residual series and return-to-normal labeling.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calendar::MINUTES_PER_WEEK;
use crate::datagen::{Channel, RawSeries};
use crate::error::{domain, Error, Result};

/// Speed band below the profile that still counts as normal, km/h.
pub const RTN_MARGIN: f64 = 8.0;
/// Consecutive normal minutes needed to declare return to normal.
pub const RTN_RUN: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Residuals beyond this many MAD-scaled units are excluded in the second pass.
    pub residual_threshold: f64,
    pub rtn_margin: f64,
    pub rtn_run: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { residual_threshold: 4.0, rtn_margin: RTN_MARGIN, rtn_run: RTN_RUN }
    }
}

/// Median value per minute-of-week.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeeklyProfile {
    pub link_id: usize,
    pub channel: Channel,
    pub slots: Vec<f64>,
    /// Slots with no unmasked sample, filled by interpolation.
    #[serde(default)]
    pub filled_slots: Vec<usize>,
}

impl WeeklyProfile {
    pub fn at(&self, minute: usize) -> f64 {
        self.slots[minute % MINUTES_PER_WEEK]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledIncident {
    pub incident_id: u64,
    pub link_id: usize,
    pub start: usize,
    pub rtn: usize,
    /// `rtn - start`, minutes.
    pub duration: usize,
    /// True when the return to normal was observed; false when censored at data end.
    pub event: bool,
}

/// An operator flag: `start..end` minutes on a link.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flag {
    pub incident_id: u64,
    pub link_id: usize,
    pub start: usize,
    pub end: usize,
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Slot `s` is the median of unmasked samples at minute-of-week `s`.
/// Slots with no samples are linearly interpolated between the nearest
/// filled neighbours, wrapping around the week.
pub fn build_profile(series: &RawSeries, mask: &[bool]) -> Result<WeeklyProfile> {
    let n = series.values.len();
    if n % MINUTES_PER_WEEK != 0 || n / MINUTES_PER_WEEK < 2 {
        return domain(format!("series length {n} is not a whole number (>= 2) of weeks"));
    }
    if mask.len() != n {
        return domain(format!("mask length {} differs from series length {n}", mask.len()));
    }
    let weeks = n / MINUTES_PER_WEEK;
    let mut slots = vec![f64::NAN; MINUTES_PER_WEEK];
    let mut buf = Vec::with_capacity(weeks);
    for (s, slot) in slots.iter_mut().enumerate() {
        buf.clear();
        for w in 0..weeks {
            let m = w * MINUTES_PER_WEEK + s;
            if !mask[m] {
                buf.push(series.values[m]);
            }
        }
        if !buf.is_empty() {
            *slot = median_in_place(&mut buf);
        }
    }
    let filled_slots = fill_gaps(&mut slots)?;
    if !filled_slots.is_empty() {
        log::warn!(
            "link {} {}: {} empty profile slots interpolated",
            series.link_id,
            series.channel.as_str(),
            filled_slots.len()
        );
    }
    Ok(WeeklyProfile { link_id: series.link_id, channel: series.channel, slots, filled_slots })
}

fn fill_gaps(slots: &mut [f64]) -> Result<Vec<usize>> {
    let n = slots.len();
    let known: Vec<usize> = (0..n).filter(|&s| !slots[s].is_nan()).collect();
    if known.is_empty() {
        return Err(Error::Empty("every profile slot is masked".into()));
    }
    let mut filled = Vec::new();
    for (i, &a) in known.iter().enumerate() {
        let b = known[(i + 1) % known.len()];
        let gap = (b + n - a) % n;
        let gap = if gap == 0 { n } else { gap };
        let (va, vb) = (slots[a], slots[b]);
        for k in 1..gap {
            let s = (a + k) % n;
            slots[s] = va + (vb - va) * k as f64 / gap as f64;
            filled.push(s);
        }
    }
    filled.sort_unstable();
    Ok(filled)
}

/// `value[t] - slot[t mod week]`.
pub fn compute_residuals(series: &RawSeries, profile: &WeeklyProfile) -> Result<Vec<f64>> {
    if series.channel != profile.channel {
        return domain(format!(
            "profile channel {} does not match series channel {}",
            profile.channel.as_str(),
            series.channel.as_str()
        ));
    }
    Ok(series
        .values
        .iter()
        .enumerate()
        .map(|(t, v)| v - profile.at(t))
        .collect())
}

/// Robust scale: 1.4826 times the median absolute deviation.
pub fn mad_scale(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    let med = median_in_place(&mut v);
    for x in v.iter_mut() {
        *x = (*x - med).abs();
    }
    1.4826 * median_in_place(&mut v)
}

/// Flagged minutes plus minutes whose residual against the draft profile
/// exceeds `threshold` robust standard deviations.
pub fn prefilter_mask(
    series: &RawSeries,
    draft: &WeeklyProfile,
    flags: &[bool],
    threshold: f64,
) -> Result<Vec<bool>> {
    let resid = compute_residuals(series, draft)?;
    if flags.len() != resid.len() {
        return domain("flag mask length differs from series length");
    }
    let scale = mad_scale(resid.iter().zip(flags).filter(|(_, &f)| !f).map(|(r, _)| *r));
    Ok(resid
        .iter()
        .zip(flags)
        .map(|(r, &f)| f || (scale > 0.0 && r.abs() / scale > threshold))
        .collect())
}

/// Per-minute mask covering every flag window.
pub fn flag_mask(n: usize, flags: &[Flag]) -> Vec<bool> {
    let mut mask = vec![false; n];
    for f in flags {
        for m in mask.iter_mut().take(f.end.min(n)).skip(f.start) {
            *m = true;
        }
    }
    mask
}

/// Scan from `flag_start + 1` for the first minute that opens a run of
/// `run` minutes with speed above `profile - margin`. Without such a run
/// the incident is censored at the data end.
pub fn detect_rtn_with(
    speed: &RawSeries,
    profile: &WeeklyProfile,
    flag_start: usize,
    incident_id: u64,
    margin: f64,
    run: usize,
) -> Result<LabeledIncident> {
    if speed.channel != Channel::Speed || profile.channel != Channel::Speed {
        return domain("return-to-normal detection needs the speed channel");
    }
    let n = speed.values.len();
    if flag_start >= n {
        return domain(format!("flag start {flag_start} outside series of length {n}"));
    }
    let normal = |t: usize| speed.values[t] > profile.at(t) - margin;
    let mut streak = 0;
    let mut rtn = None;
    for t in flag_start + 1..n {
        if normal(t) {
            streak += 1;
            if streak == run {
                rtn = Some(t + 1 - run);
                break;
            }
        } else {
            streak = 0;
        }
    }
    let (rtn, event) = match rtn {
        Some(t) => (t, true),
        None => (n, false),
    };
    Ok(LabeledIncident {
        incident_id,
        link_id: speed.link_id,
        start: flag_start,
        rtn,
        duration: rtn - flag_start,
        event,
    })
}

pub fn detect_rtn(
    speed: &RawSeries,
    profile: &WeeklyProfile,
    flag_start: usize,
    incident_id: u64,
) -> Result<LabeledIncident> {
    detect_rtn_with(speed, profile, flag_start, incident_id, RTN_MARGIN, RTN_RUN)
}

/// Profiles, residuals and labels for one link.
#[derive(Clone, Debug)]
pub struct LinkBaseline {
    pub link_id: usize,
    /// In [`Channel::ALL`] order.
    pub profiles: Vec<WeeklyProfile>,
    pub residuals: Vec<Vec<f64>>,
    pub labels: Vec<LabeledIncident>,
}

impl LinkBaseline {
    pub fn residual(&self, c: Channel) -> &[f64] {
        &self.residuals[c.index()]
    }
}

/// Two-pass profile per channel, then labels from the speed channel.
///
/// Channels must be given in [`Channel::ALL`] order. The residual outlier
/// mask from the speed channel is shared by all channels.
pub fn label_link(series: &[RawSeries], flags: &[Flag], cfg: &BaselineConfig) -> Result<LinkBaseline> {
    if series.len() != 3 || series.iter().zip(Channel::ALL).any(|(s, c)| s.channel != c) {
        return domain("expected speed, flow and travel-time series in that order");
    }
    let link_id = series[0].link_id;
    let n = series[0].values.len();
    if series.iter().any(|s| s.values.len() != n) {
        return domain("channel series differ in length");
    }
    let flagged = flag_mask(n, flags);
    let draft = build_profile(&series[0], &flagged)?;
    let speed_mask = prefilter_mask(&series[0], &draft, &flagged, cfg.residual_threshold)?;

    let mut profiles = Vec::with_capacity(3);
    let mut residuals = Vec::with_capacity(3);
    for (k, s) in series.iter().enumerate() {
        let mask = if k == 0 {
            speed_mask.clone()
        } else {
            let own_draft = build_profile(s, &flagged)?;
            let own = prefilter_mask(s, &own_draft, &speed_mask, cfg.residual_threshold)?;
            own.iter().zip(&speed_mask).map(|(a, b)| *a || *b).collect()
        };
        let p = build_profile(s, &mask)?;
        residuals.push(compute_residuals(s, &p)?);
        profiles.push(p);
    }
    let labels = flags
        .iter()
        .map(|f| detect_rtn_with(&series[0], &profiles[0], f.start, f.incident_id, cfg.rtn_margin, cfg.rtn_run))
        .collect::<Result<Vec<_>>>()?;
    Ok(LinkBaseline { link_id, profiles, residuals, labels })
}

/// Write profiles as `link_id,channel,minute_of_week,value`.
pub fn write_profiles_csv<'a, W: Write>(
    out: W,
    profiles: impl IntoIterator<Item = &'a WeeklyProfile>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["link_id", "channel", "minute_of_week", "value"])?;
    for p in profiles {
        let link = p.link_id.to_string();
        for (s, v) in p.slots.iter().enumerate() {
            w.write_record([link.as_str(), p.channel.as_str(), &s.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(values: Vec<f64>) -> RawSeries {
        RawSeries { link_id: 0, channel: Channel::Speed, values }
    }

    #[test]
    fn constant_series_profile() {
        let s = series(vec![100.0; 2 * MINUTES_PER_WEEK]);
        let p = build_profile(&s, &vec![false; s.values.len()]).unwrap();
        assert_eq!(p.slots.len(), MINUTES_PER_WEEK);
        assert!(p.slots.iter().all(|&v| v == 100.0));
        assert!(p.filled_slots.is_empty());
    }

    #[test]
    fn median_examples() {
        let slot = 1234;
        let mut v = vec![0.0; 3 * MINUTES_PER_WEEK];
        for (w, x) in [50.0, 60.0, 70.0].iter().enumerate() {
            v[w * MINUTES_PER_WEEK + slot] = *x;
        }
        let p = build_profile(&series(v), &vec![false; 3 * MINUTES_PER_WEEK]).unwrap();
        assert_eq!(p.slots[slot], 60.0);

        let mut v = vec![0.0; 4 * MINUTES_PER_WEEK];
        let mut mask = vec![false; v.len()];
        for (w, x) in [50.0, 60.0, 70.0, 200.0].iter().enumerate() {
            v[w * MINUTES_PER_WEEK + slot] = *x;
        }
        mask[3 * MINUTES_PER_WEEK + slot] = true;
        let p = build_profile(&series(v), &mask).unwrap();
        assert_eq!(p.slots[slot], 60.0);
    }

    #[test]
    fn empty_slots_interpolate_with_wrap() {
        let n = 2 * MINUTES_PER_WEEK;
        let v: Vec<f64> = (0..n).map(|t| (t % MINUTES_PER_WEEK) as f64).collect();
        let mut mask = vec![false; n];
        for w in 0..2 {
            for s in [10, 11, 12] {
                mask[w * MINUTES_PER_WEEK + s] = true;
            }
            mask[w * MINUTES_PER_WEEK + MINUTES_PER_WEEK - 1] = true;
            mask[w * MINUTES_PER_WEEK] = true;
        }
        let p = build_profile(&series(v), &mask).unwrap();
        assert_eq!(p.filled_slots, vec![0, 10, 11, 12, MINUTES_PER_WEEK - 1]);
        assert!((p.slots[11] - 11.0).abs() < 1e-12);
        // wrap: between slot 10078 (value 10078) and slot 1 (value 1)
        let expect_last = 10_078.0 + (1.0 - 10_078.0) / 3.0;
        assert!((p.slots[MINUTES_PER_WEEK - 1] - expect_last).abs() < 1e-9);
        let all_masked = build_profile(&series(vec![1.0; n]), &vec![true; n]);
        assert!(matches!(all_masked, Err(Error::Empty(_))));
    }

    #[test]
    fn residual_arithmetic() {
        let n = 2 * MINUTES_PER_WEEK;
        let s = series((0..n).map(|t| (t % 97) as f64).collect());
        let p = WeeklyProfile {
            link_id: 0,
            channel: Channel::Speed,
            slots: (0..MINUTES_PER_WEEK).map(|t| (t % 97) as f64).collect(),
            filled_slots: vec![],
        };
        let r = compute_residuals(&s, &p).unwrap();
        assert!(r[..MINUTES_PER_WEEK].iter().all(|&x| x == 0.0));

        let flat = WeeklyProfile { slots: vec![100.0; MINUTES_PER_WEEK], ..p.clone() };
        let s80 = series(vec![80.0; n]);
        assert_eq!(compute_residuals(&s80, &flat).unwrap()[5], -20.0);

        let shifted = series(s.values.iter().map(|v| v + 5.0).collect());
        let r2 = compute_residuals(&shifted, &p).unwrap();
        for (a, b) in r.iter().zip(&r2) {
            assert!((b - a - 5.0).abs() < 1e-12);
        }
        let flow = RawSeries { channel: Channel::Flow, ..s };
        assert!(compute_residuals(&flow, &p).is_err());
    }

    fn flat_profile(v: f64) -> WeeklyProfile {
        WeeklyProfile { link_id: 0, channel: Channel::Speed, slots: vec![v; MINUTES_PER_WEEK], filled_slots: vec![] }
    }

    #[test]
    fn rtn_run_rule() {
        let n = 2 * MINUTES_PER_WEEK;
        let start = 1000;
        let mut v = vec![100.0; n];
        for x in v.iter_mut().skip(start).take(5) {
            *x = 50.0;
        }
        let l = detect_rtn(&series(v), &flat_profile(100.0), start, 1).unwrap();
        assert_eq!((l.rtn, l.duration, l.event), (start + 5, 5, true));
    }

    #[test]
    fn short_recovery_is_censored() {
        let n = 2 * MINUTES_PER_WEEK;
        let start = 1000;
        let mut v = vec![50.0; n];
        v[start + 3] = 100.0;
        v[start + 4] = 100.0;
        let l = detect_rtn(&series(v), &flat_profile(100.0), start, 1).unwrap();
        assert_eq!((l.rtn, l.event), (n, false));
        assert_eq!(l.duration, n - start);
        assert!(detect_rtn(&series(vec![1.0; n]), &flat_profile(1.0), n, 1).is_err());
    }

    #[test]
    fn prefilter_cases() {
        let n = 2 * MINUTES_PER_WEEK;
        // deterministic +-1 wiggle: MAD scale 1.4826
        let v: Vec<f64> = (0..n).map(|t| 100.0 + if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let profile = flat_profile(100.0);
        let none = vec![false; n];
        let m = prefilter_mask(&series(v.clone()), &profile, &none, 4.0).unwrap();
        assert!(m.iter().all(|&x| !x));

        let mut flags = vec![false; n];
        for f in flags.iter_mut().skip(600).take(60) {
            *f = true;
        }
        let m = prefilter_mask(&series(v.clone()), &profile, &flags, 4.0).unwrap();
        assert_eq!(m.iter().filter(|&&x| x).count(), 60);

        // Gaussian noise with unit sd and a +6 sd spike
        use rand::Rng as _;
        let mut rng = crate::rng::keyed(1, 2, 3);
        let mut noisy: Vec<f64> = (0..n)
            .map(|_| 100.0 + rng.sample::<f64, _>(rand_distr::StandardNormal).clamp(-3.5, 3.5))
            .collect();
        for x in noisy.iter_mut().skip(5000).take(3) {
            *x = 106.0;
        }
        let m = prefilter_mask(&series(noisy), &profile, &none, 4.0).unwrap();
        assert!(m[5000] && m[5001] && m[5002]);
        assert_eq!(m.iter().filter(|&&x| x).count(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn periodic_series_profile_is_one_period(weeks in 2usize..5, amp in 0.0..30.0f64, seed in any::<u64>()) {
            let mut rng = crate::rng::keyed(seed, 0, 0);
            let period: Vec<f64> = (0..MINUTES_PER_WEEK)
                .map(|m| 90.0 + amp * (m as f64 / 300.0).sin() + rand::Rng::random_range(&mut rng, -3.0..3.0))
                .collect();
            let v: Vec<f64> = (0..weeks * MINUTES_PER_WEEK).map(|t| period[t % MINUTES_PER_WEEK]).collect();
            let p = build_profile(&series(v), &vec![false; weeks * MINUTES_PER_WEEK]).unwrap();
            prop_assert_eq!(p.slots, period);
        }

        #[test]
        fn detection_shifts_with_the_series(
            dip in proptest::collection::vec(30.0..110.0f64, 1..200),
            start in 0usize..MINUTES_PER_WEEK,
            tail in 0usize..300,
        ) {
            let profile = WeeklyProfile {
                link_id: 0,
                channel: Channel::Speed,
                slots: (0..MINUTES_PER_WEEK).map(|m| 95.0 + 10.0 * (m as f64 / 700.0).cos()).collect(),
                filled_slots: vec![],
            };
            let n = (start + 1 + dip.len() + tail).max(MINUTES_PER_WEEK);
            let mut v: Vec<f64> = (0..n).map(|t| profile.at(t)).collect();
            for (k, d) in dip.iter().enumerate() {
                v[start + 1 + k] = *d;
            }
            let shifted: Vec<f64> = (0..MINUTES_PER_WEEK).map(|t| profile.at(t)).chain(v.iter().copied()).collect();
            let a = detect_rtn(&series(v), &profile, start, 1).unwrap();
            let b = detect_rtn(&series(shifted), &profile, start + MINUTES_PER_WEEK, 1).unwrap();
            prop_assert_eq!(b.rtn, a.rtn + MINUTES_PER_WEEK);
            prop_assert_eq!(b.duration, a.duration);
            prop_assert_eq!(a.event, a.rtn != n);
            prop_assert_eq!(b.event, b.rtn != n + MINUTES_PER_WEEK);
        }
    }
}
