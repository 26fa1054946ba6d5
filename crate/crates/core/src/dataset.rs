//! Labeled incident records assembled from a corpus.

use serde::{Deserialize, Serialize};

use crate::baseline::{label_link, BaselineConfig, Flag, LabeledIncident, LinkBaseline, WeeklyProfile};
use crate::datagen::{field, Channel, Corpus, CovValue, Covariates};
use crate::error::Result;
use crate::features::{is_atypical, IncidentTrace, TRACE_PRE};
use crate::par;

/// One labeled incident with its covariates and residual trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub id: u64,
    pub link_id: usize,
    pub start: usize,
    /// Labeled duration in minutes.
    pub duration: f64,
    /// Return to normal observed (false: censored at data end).
    pub event: bool,
    pub covariates: Covariates,
    pub trace: IncidentTrace,
    /// Generator duration, when known.
    #[serde(default)]
    pub true_duration: Option<f64>,
}

impl IncidentRecord {
    /// Still ongoing `t` minutes after the start.
    pub fn active_at(&self, t: f64) -> bool {
        self.duration > t
    }
}

#[derive(Clone, Debug)]
pub struct LabeledCorpus {
    pub profiles: Vec<WeeklyProfile>,
    pub labels: Vec<LabeledIncident>,
    pub records: Vec<IncidentRecord>,
}

/// Operator flags for every generated incident.
pub fn corpus_flags(corpus: &Corpus) -> Vec<Vec<Flag>> {
    let n = corpus.n_minutes();
    corpus
        .links
        .iter()
        .map(|l| {
            l.incidents
                .iter()
                .map(|i| Flag { incident_id: i.id, link_id: i.link_id, start: i.start, end: i.flag_end.min(n) })
                .collect()
        })
        .collect()
}

/// Label every link, then attach neighbour flags and traces.
pub fn label_corpus(corpus: &Corpus, cfg: &BaselineConfig) -> Result<LabeledCorpus> {
    let flags = corpus_flags(corpus);
    let baselines: Vec<LinkBaseline> = par::map_range(corpus.links.len(), |k| {
        label_link(&corpus.links[k].series, &flags[k], cfg)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let n_links = corpus.links.len();
    let mut records = Vec::new();
    let mut labels = Vec::new();
    for (k, (link, base)) in corpus.links.iter().zip(&baselines).enumerate() {
        for (inc, label) in link.incidents.iter().zip(&base.labels) {
            labels.push(label.clone());
            if inc.start < TRACE_PRE {
                continue;
            }
            let mut cov = inc.covariates.clone();
            let (up, down) = if n_links > 1 {
                let up = &baselines[(k + n_links - 1) % n_links];
                let down = &baselines[(k + 1) % n_links];
                (
                    is_atypical(up.residual(Channel::Speed), inc.start),
                    is_atypical(down.residual(Channel::Speed), inc.start),
                )
            } else {
                (false, false)
            };
            cov.insert(field::UPSTREAM_ATYPICAL.into(), CovValue::Flag(up));
            cov.insert(field::DOWNSTREAM_ATYPICAL.into(), CovValue::Flag(down));
            let res = [
                base.residual(Channel::Speed),
                base.residual(Channel::Flow),
                base.residual(Channel::TravelTime),
            ];
            let trace = IncidentTrace::cut(res, inc.start, label.rtn + 1)?;
            records.push(IncidentRecord {
                id: inc.id,
                link_id: inc.link_id,
                start: inc.start,
                duration: label.duration as f64,
                event: label.event,
                covariates: cov,
                trace,
                true_duration: Some(inc.duration),
            });
        }
    }
    let profiles = baselines.into_iter().flat_map(|b| b.profiles).collect();
    Ok(LabeledCorpus { profiles, labels, records })
}
