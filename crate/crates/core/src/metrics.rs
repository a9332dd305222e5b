//! Root-cause ranking metrics at window, event and dataset level.
//!
//! Sensor rankings sort by descending score with ties going to the lower
//! sensor index. Per-timestep rankings come from the window ending at that
//! timestep.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::AnomalyEvent;
use crate::error::{RcaError, Result};

pub const DEFAULT_KS: [usize; 3] = [3, 5, 10];
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Magnitudes `|phi_j|` and the induced sensor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAttribution {
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
}

impl RankedAttribution {
    /// Rank by `|phi|`, or by signed `phi` when `signed` is set. Scores are
    /// always the magnitudes.
    pub fn from_values(values: &[f64], signed: bool) -> Result<Self> {
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(RcaError::NonFinite {
                row: 0,
                column: format!("attribution of sensor {j}"),
            });
        }
        let key: Vec<f64> = if signed {
            values.to_vec()
        } else {
            values.iter().map(|v| v.abs()).collect()
        };
        let mut ranking: Vec<usize> = (0..values.len()).collect();
        ranking.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
        Ok(Self {
            scores: values.iter().map(|v| v.abs()).collect(),
            ranking,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.scores.len()
    }

    /// First `min(k, d)` sensors of the ranking.
    pub fn top_k(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }

    /// `|phi_j| / sum |phi|`, all zero when the total is zero.
    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.scores.iter().sum();
        if total > 0.0 {
            self.scores.iter().map(|s| s / total).collect()
        } else {
            vec![0.0; self.scores.len()]
        }
    }
}

fn check_inputs(ranking: &RankedAttribution, truth: &BTreeSet<usize>, k: usize) -> Result<()> {
    if truth.is_empty() {
        return Err(RcaError::Empty("ground-truth sensor set".into()));
    }
    if k == 0 {
        return Err(RcaError::InvalidParameter("K must be >= 1".into()));
    }
    if let Some(&j) = truth.iter().find(|&&j| j >= ranking.n_sensors()) {
        return Err(RcaError::OutOfRange(format!(
            "ground-truth sensor {j} not in 0..{}",
            ranking.n_sensors()
        )));
    }
    Ok(())
}

/// Fraction of the ground-truth sensors found in the top `k`. `k` larger
/// than `d` is treated as `d`.
pub fn recall_at_k(ranking: &RankedAttribution, truth: &BTreeSet<usize>, k: usize) -> Result<f64> {
    check_inputs(ranking, truth, k)?;
    let hits = ranking.top_k(k).iter().filter(|j| truth.contains(j)).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Recall weighted by each found sensor's share of the attribution mass.
pub fn cw_rcs_at_k(ranking: &RankedAttribution, truth: &BTreeSet<usize>, k: usize) -> Result<f64> {
    check_inputs(ranking, truth, k)?;
    let share = ranking.normalized();
    let mass: f64 = ranking
        .top_k(k)
        .iter()
        .filter(|j| truth.contains(j))
        .map(|&j| share[j])
        .sum();
    Ok(mass / truth.len() as f64)
}

/// Whether any ground-truth sensor is in the top `k`.
pub fn is_hit(ranking: &RankedAttribution, truth: &BTreeSet<usize>, k: usize) -> bool {
    ranking.top_k(k).iter().any(|j| truth.contains(j))
}

/// Early identification `E` and persistence `A` from one ranking per event
/// timestep, in time order.
pub fn early_and_persistence(
    per_timestep: &[RankedAttribution],
    truth: &BTreeSet<usize>,
    k: usize,
) -> Result<(f64, f64)> {
    if per_timestep.is_empty() {
        return Err(RcaError::Empty("no per-timestep rankings for the event".into()));
    }
    if truth.is_empty() {
        return Err(RcaError::Empty("ground-truth sensor set".into()));
    }
    let ta = per_timestep.len() as f64;
    let hits: Vec<bool> = per_timestep.iter().map(|r| is_hit(r, truth, k)).collect();
    let early = hits
        .iter()
        .position(|&h| h)
        .map_or(0.0, |first| (1.0 - first as f64 / ta).max(0.0));
    let persistence = hits.iter().filter(|&&h| h).count() as f64 / ta;
    Ok((early, persistence))
}

/// `F_beta`-style harmonic combination of `E` and `A`.
pub fn temporal_hm(early: f64, persistence: f64, beta: f64, eps: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * early + persistence + eps;
    if den == 0.0 {
        return 0.0;
    }
    (1.0 + b2) * early * persistence / den
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    pub ks: Vec<usize>,
    pub beta: f64,
    pub eps: f64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            beta: DEFAULT_BETA,
            eps: DEFAULT_EPS,
        }
    }
}

impl MetricSettings {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(RcaError::InvalidParameter("metric Ks must be nonempty and >= 1".into()));
        }
        if !(self.beta > 0.0) || !(self.eps >= 0.0) {
            return Err(RcaError::InvalidParameter("need beta > 0 and eps >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub window_start: usize,
    pub ranking: RankedAttribution,
    pub recall: BTreeMap<usize, f64>,
    pub cw_rcs: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEvaluation {
    pub event: AnomalyEvent,
    pub per_window: Vec<WindowScore>,
    /// Means over `per_window`, keyed by K.
    pub recall: BTreeMap<usize, f64>,
    pub cw_rcs: BTreeMap<usize, f64>,
    #[serde(rename = "E")]
    pub early: BTreeMap<usize, f64>,
    #[serde(rename = "A")]
    pub persistence: BTreeMap<usize, f64>,
    pub temporal_hm: BTreeMap<usize, f64>,
    /// Ground-truth sensors that reached the top K in some window.
    pub identified: BTreeMap<usize, BTreeSet<usize>>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Score one event from the rankings of its windows and one ranking per
/// event timestep.
pub fn evaluate_event(
    event: &AnomalyEvent,
    windows: Vec<(usize, RankedAttribution)>,
    per_timestep: &[RankedAttribution],
    settings: &MetricSettings,
) -> Result<EventEvaluation> {
    settings.validate()?;
    if windows.is_empty() {
        return Err(RcaError::Empty(format!("no windows for event at {}", event.onset)));
    }
    if per_timestep.len() != event.duration {
        return Err(RcaError::DimensionMismatch {
            what: "per-timestep rankings",
            expected: event.duration,
            found: per_timestep.len(),
        });
    }
    let truth = &event.ground_truth;
    let per_window = windows
        .into_iter()
        .map(|(window_start, ranking)| {
            let mut recall = BTreeMap::new();
            let mut cw_rcs = BTreeMap::new();
            for &k in &settings.ks {
                recall.insert(k, recall_at_k(&ranking, truth, k)?);
                cw_rcs.insert(k, cw_rcs_at_k(&ranking, truth, k)?);
            }
            Ok(WindowScore {
                window_start,
                ranking,
                recall,
                cw_rcs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ev = EventEvaluation {
        event: event.clone(),
        recall: BTreeMap::new(),
        cw_rcs: BTreeMap::new(),
        early: BTreeMap::new(),
        persistence: BTreeMap::new(),
        temporal_hm: BTreeMap::new(),
        identified: BTreeMap::new(),
        per_window,
    };
    for &k in &settings.ks {
        ev.recall.insert(k, mean(ev.per_window.iter().map(|w| w.recall[&k])));
        ev.cw_rcs.insert(k, mean(ev.per_window.iter().map(|w| w.cw_rcs[&k])));
        let (e, a) = early_and_persistence(per_timestep, truth, k)?;
        ev.early.insert(k, e);
        ev.persistence.insert(k, a);
        ev.temporal_hm.insert(k, temporal_hm(e, a, settings.beta, settings.eps));
        let found = ev
            .per_window
            .iter()
            .flat_map(|w| w.ranking.top_k(k).iter().copied())
            .filter(|j| truth.contains(j))
            .collect();
        ev.identified.insert(k, found);
    }
    Ok(ev)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub recall: BTreeMap<usize, f64>,
    pub cw_rcs: BTreeMap<usize, f64>,
    #[serde(rename = "E", skip_serializing_if = "BTreeMap::is_empty", default)]
    pub early: BTreeMap<usize, f64>,
    #[serde(rename = "A", skip_serializing_if = "BTreeMap::is_empty", default)]
    pub persistence: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub temporal_hm: BTreeMap<usize, f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAggregates {
    /// Means over all anomalous windows pooled across events.
    pub window_level: Aggregate,
    /// Means of per-event values.
    pub event_level: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub event: AnomalyEvent,
    pub n_windows: usize,
    pub recall: BTreeMap<usize, f64>,
    pub cw_rcs: BTreeMap<usize, f64>,
    #[serde(rename = "E")]
    pub early: BTreeMap<usize, f64>,
    #[serde(rename = "A")]
    pub persistence: BTreeMap<usize, f64>,
    pub temporal_hm: BTreeMap<usize, f64>,
    pub identified: BTreeMap<usize, BTreeSet<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_event: Vec<EventSummary>,
    pub dataset: DatasetAggregates,
}

pub fn evaluate_dataset(events: &[EventEvaluation]) -> Result<MetricsReport> {
    let first = events
        .first()
        .ok_or_else(|| RcaError::Empty("no evaluated events".into()))?;
    let ks: Vec<usize> = first.recall.keys().copied().collect();
    let mut window_level = Aggregate::default();
    let mut event_level = Aggregate::default();
    let all_windows = || events.iter().flat_map(|e| e.per_window.iter());
    window_level.n = all_windows().count();
    event_level.n = events.len();
    for &k in &ks {
        let get = |m: &BTreeMap<usize, f64>| m.get(&k).copied().unwrap_or(0.0);
        window_level.recall.insert(k, mean(all_windows().map(|w| get(&w.recall))));
        window_level.cw_rcs.insert(k, mean(all_windows().map(|w| get(&w.cw_rcs))));
        event_level.recall.insert(k, mean(events.iter().map(|e| get(&e.recall))));
        event_level.cw_rcs.insert(k, mean(events.iter().map(|e| get(&e.cw_rcs))));
        event_level.early.insert(k, mean(events.iter().map(|e| get(&e.early))));
        event_level.persistence.insert(k, mean(events.iter().map(|e| get(&e.persistence))));
        event_level.temporal_hm.insert(k, mean(events.iter().map(|e| get(&e.temporal_hm))));
    }
    Ok(MetricsReport {
        per_event: events
            .iter()
            .map(|e| EventSummary {
                event: e.event.clone(),
                n_windows: e.per_window.len(),
                recall: e.recall.clone(),
                cw_rcs: e.cw_rcs.clone(),
                early: e.early.clone(),
                persistence: e.persistence.clone(),
                temporal_hm: e.temporal_hm.clone(),
                identified: e.identified.clone(),
            })
            .collect(),
        dataset: DatasetAggregates {
            window_level,
            event_level,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranked(v: &[f64]) -> RankedAttribution {
        RankedAttribution::from_values(v, false).unwrap()
    }

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn ranking_order_and_ties() {
        let r = ranked(&[0.5, -2.0, 0.5, 0.0]);
        assert_eq!(r.ranking, vec![1, 0, 2, 3]);
        assert_eq!(r.scores, vec![0.5, 2.0, 0.5, 0.0]);
        let s = RankedAttribution::from_values(&[0.5, -2.0, 0.5, 0.0], true).unwrap();
        assert_eq!(s.ranking, vec![0, 2, 3, 1]);
        assert!(RankedAttribution::from_values(&[f64::NAN], false).is_err());
        let zero = ranked(&[0.0; 3]);
        assert_eq!(zero.ranking, vec![0, 1, 2]);
        assert_eq!(cw_rcs_at_k(&zero, &set(&[0]), 1).unwrap(), 0.0);
    }

    #[test]
    fn recall_cases() {
        let r = ranked(&[0.9, 0.1, 0.5, 0.3]);
        assert_eq!(recall_at_k(&r, &set(&[0]), 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&r, &set(&[0, 1]), 3).unwrap(), 0.5);
        assert_eq!(recall_at_k(&r, &set(&[1]), 2).unwrap(), 0.0);
        assert!(recall_at_k(&r, &set(&[]), 1).is_err());
        assert!(recall_at_k(&r, &set(&[7]), 1).is_err());
    }

    #[test]
    fn cw_rcs_cases() {
        let r = ranked(&[0.6, 0.3, 0.1]);
        assert!((cw_rcs_at_k(&r, &set(&[0]), 1).unwrap() - 0.6).abs() < 1e-15);
        let concentrated = ranked(&[0.0, 4.0, 0.0]);
        assert_eq!(cw_rcs_at_k(&concentrated, &set(&[1]), 1).unwrap(), 1.0);
    }

    fn hit_ranking(hit: bool) -> RankedAttribution {
        if hit {
            ranked(&[1.0, 0.0, 0.0])
        } else {
            ranked(&[0.0, 1.0, 0.0])
        }
    }

    #[test]
    fn early_and_persistence_cases() {
        let truth = set(&[0]);
        let all: Vec<_> = (0..5).map(|_| hit_ranking(true)).collect();
        assert_eq!(early_and_persistence(&all, &truth, 1).unwrap(), (1.0, 1.0));
        let none: Vec<_> = (0..5).map(|_| hit_ranking(false)).collect();
        assert_eq!(early_and_persistence(&none, &truth, 1).unwrap(), (0.0, 0.0));
        let pattern = [false, false, false, false, true, true, true, true, true, true];
        let mixed: Vec<_> = pattern.iter().map(|&h| hit_ranking(h)).collect();
        let (e, a) = early_and_persistence(&mixed, &truth, 1).unwrap();
        assert!((e - 0.6).abs() < 1e-15 && (a - 0.6).abs() < 1e-15);
        assert!(early_and_persistence(&[], &truth, 1).is_err());
    }

    #[test]
    fn temporal_hm_cases() {
        assert_eq!(temporal_hm(1.0, 1.0, 1.0, 0.0), 1.0);
        assert_eq!(temporal_hm(1.0, 0.0, 1.0, 1e-8), 0.0);
        assert!((temporal_hm(0.8, 0.5, 1.0, 0.0) - 0.8 / 1.3).abs() < 1e-12);
        assert_eq!(temporal_hm(0.0, 0.0, 1.0, 0.0), 0.0);
    }

    #[test]
    fn beta_limits() {
        // beta -> 0 leaves E, beta -> infinity leaves A
        for e in [0.25, 0.5, 0.75, 1.0] {
            for a in [0.25, 0.5, 0.75, 1.0] {
                assert!((temporal_hm(e, a, 0.01, 0.0) - e).abs() < 0.05);
                assert!((temporal_hm(e, a, 100.0, 0.0) - a).abs() < 0.05);
            }
        }
    }

    fn event(onset: usize, duration: usize, truth: &[usize]) -> AnomalyEvent {
        AnomalyEvent::new(onset, duration, set(truth)).unwrap()
    }

    #[test]
    fn single_window_dataset() {
        let ev = event(10, 2, &[0]);
        let settings = MetricSettings {
            ks: vec![1],
            ..Default::default()
        };
        let r = ranked(&[0.7, 0.3]);
        let e = evaluate_event(&ev, vec![(5, r.clone())], &[r.clone(), r], &settings).unwrap();
        let rep = evaluate_dataset(&[e.clone()]).unwrap();
        assert_eq!(rep.dataset.window_level.recall[&1], e.per_window[0].recall[&1]);
        assert_eq!(rep.dataset.event_level.recall[&1], 1.0);
        assert_eq!(rep.per_event[0].identified[&1], set(&[0]));
    }

    #[test]
    fn window_and_event_means_disagree() {
        let settings = MetricSettings {
            ks: vec![1],
            ..Default::default()
        };
        let good = ranked(&[1.0, 0.0]);
        let bad = ranked(&[0.0, 1.0]);
        let e1 = evaluate_event(&event(10, 1, &[0]), vec![(5, good.clone())], &[good], &settings).unwrap();
        let e2 = evaluate_event(
            &event(30, 1, &[0]),
            vec![(25, bad.clone()), (26, bad.clone())],
            &[bad],
            &settings,
        )
        .unwrap();
        let rep = evaluate_dataset(&[e1, e2]).unwrap();
        assert!((rep.dataset.window_level.recall[&1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((rep.dataset.event_level.recall[&1] - 0.5).abs() < 1e-15);
        let json = serde_json::to_value(&rep).unwrap();
        assert!(json["per_event"][0]["recall"]["1"].is_number());
        assert!(json["per_event"][0]["E"]["1"].is_number());
        assert!(json["dataset"]["window_level"]["recall"]["1"].is_number());
    }

    #[test]
    fn event_evaluation_errors() {
        let ev = event(10, 3, &[0]);
        let r = ranked(&[1.0, 0.0]);
        let s = MetricSettings::default();
        assert!(evaluate_event(&ev, vec![], &[r.clone(), r.clone(), r.clone()], &s).is_err());
        assert!(evaluate_event(&ev, vec![(0, r.clone())], &[r.clone()], &s).is_err());
        assert!(evaluate_dataset(&[]).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, BTreeSet<usize>, usize)> {
        (2usize..12).prop_flat_map(|d| {
            (
                prop::collection::vec(-5.0f64..5.0, d),
                prop::collection::btree_set(0..d, 1..=d),
                1..=d,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn cw_rcs_bounded_by_recall((v, s, k) in instance()) {
            let r = ranked(&v);
            prop_assert!(cw_rcs_at_k(&r, &s, k).unwrap() <= recall_at_k(&r, &s, k).unwrap());
        }

        #[test]
        fn monotone_in_k((v, s, k) in instance()) {
            let r = ranked(&v);
            if k < v.len() {
                prop_assert!(recall_at_k(&r, &s, k).unwrap() <= recall_at_k(&r, &s, k + 1).unwrap());
                prop_assert!(cw_rcs_at_k(&r, &s, k).unwrap() <= cw_rcs_at_k(&r, &s, k + 1).unwrap());
            }
        }

        #[test]
        fn scale_invariant((v, s, k) in instance(), c in 0.01f64..100.0) {
            let r = ranked(&v);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let rs = ranked(&scaled);
            prop_assert_eq!(&r.ranking, &rs.ranking);
            prop_assert_eq!(recall_at_k(&r, &s, k).unwrap(), recall_at_k(&rs, &s, k).unwrap());
            prop_assert!((cw_rcs_at_k(&r, &s, k).unwrap() - cw_rcs_at_k(&rs, &s, k).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn temporal_hm_range(e in 0.0f64..=1.0, a in 0.0f64..=1.0, beta in 0.01f64..100.0, eps in 0.0f64..1e-3) {
            let h = temporal_hm(e, a, beta, eps);
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert!(h <= e.max(a) + 1e-12);
        }

        #[test]
        fn ranking_is_permutation(v in prop::collection::vec(-1e3f64..1e3, 1..20), signed: bool) {
            let r = RankedAttribution::from_values(&v, signed).unwrap();
            let mut sorted = r.ranking.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..v.len()).collect::<Vec<_>>());
            prop_assert!(r.scores.iter().all(|&s| s >= 0.0));
        }
    }
}
