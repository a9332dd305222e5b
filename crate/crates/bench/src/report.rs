//! Run reports: JSON records plus the per-event text table.

use std::fmt::Write as _;

use rca_core::detector::DetectionMetrics;
use rca_core::metrics::{Aggregate, MetricsReport};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub kind: String,
    pub threshold: f64,
    /// Windows outside the normal ranges.
    pub n_windows: usize,
    pub n_anomalous: usize,
    pub n_flagged: usize,
    pub metrics: DetectionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub start: usize,
    pub score: f64,
    pub flagged: bool,
    /// Signed attribution per sensor.
    pub attribution: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// 1-based position in the labels.
    pub id: usize,
    pub kind: Option<String>,
    pub onset: usize,
    pub duration: usize,
    pub sensors: Vec<String>,
    /// Last timestep of the first flagged window.
    pub detected_at: Option<usize>,
    /// Peak of the summed tensor of the first flagged window.
    pub onset_estimate: Option<usize>,
    pub windows: Vec<WindowRecord>,
}

/// Wall-clock breakdown. Retrieval and scoring are summed over workers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub jobs: usize,
    pub index_seconds: f64,
    pub detection_seconds: f64,
    pub retrieval_seconds: f64,
    pub scoring_seconds: f64,
    pub tensor_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub sensor_names: Vec<String>,
    pub detector: DetectorSummary,
    pub events: Vec<EventRecord>,
    pub metrics: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

fn fmt_opt(v: Option<&f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

impl RunReport {
    /// Pretty JSON without timings; identical across reruns and job counts.
    pub fn canonical_json(&self) -> String {
        let mut view = self.clone();
        view.timings = None;
        serde_json::to_string_pretty(&view).expect("report serializes")
    }

    pub fn full_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-event table at metric depth `k`: attack, Top@kR, CW@k,
    /// TempHM@k, FeatureID.
    pub fn table(&self, k: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6}  {:<10}  {:>8}  {:>7}  {:>10}  FeatureID",
            "attack",
            "kind",
            format!("Top@{k}R"),
            format!("CW@{k}"),
            format!("TempHM@{k}")
        );
        for (rec, ev) in self.events.iter().zip(&self.metrics.per_event) {
            let found: Vec<&str> = ev
                .identified
                .get(&k)
                .into_iter()
                .flatten()
                .map(|&j| self.sensor_names[j].as_str())
                .collect();
            let feature_id = if found.is_empty() {
                "---".to_string()
            } else {
                found.join(",")
            };
            let _ = writeln!(
                out,
                "{:>6}  {:<10}  {:>8}  {:>7}  {:>10}  {}",
                rec.id,
                rec.kind.as_deref().unwrap_or("-"),
                fmt_opt(ev.recall.get(&k)),
                fmt_opt(ev.cw_rcs.get(&k)),
                fmt_opt(ev.temporal_hm.get(&k)),
                feature_id
            );
        }
        let agg = |name: &str, a: &Aggregate, out: &mut String| {
            let _ = writeln!(
                out,
                "{:>6}  {:<10}  {:>8}  {:>7}  {:>10}  n={}",
                name,
                "",
                fmt_opt(a.recall.get(&k)),
                fmt_opt(a.cw_rcs.get(&k)),
                fmt_opt(a.temporal_hm.get(&k)),
                a.n
            );
        };
        agg("window", &self.metrics.dataset.window_level, &mut out);
        agg("event", &self.metrics.dataset.event_level, &mut out);
        out
    }

    /// Detector line and timing breakdown.
    pub fn summary(&self) -> String {
        let d = &self.detector;
        let mut out = format!(
            "detector {}: threshold {:.4}, precision {:.3}, recall {:.3}, f1 {:.3}, auc {}\n",
            d.kind,
            d.threshold,
            d.metrics.precision,
            d.metrics.recall,
            d.metrics.f1,
            d.metrics.roc_auc.map_or_else(|| "-".into(), |a| format!("{a:.3}"))
        );
        if let Some(t) = &self.timings {
            let _ = writeln!(
                out,
                "timing (s, jobs={}): index {:.2}, detection {:.2}, retrieval {:.2}, scoring {:.2}, tensors {:.2}, total {:.2}",
                t.jobs,
                t.index_seconds,
                t.detection_seconds,
                t.retrieval_seconds,
                t.scoring_seconds,
                t.tensor_seconds,
                t.total_seconds
            );
        }
        out
    }
}

/// One row per swept value, at metric depth `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    /// Window-level means.
    pub top_k_recall: f64,
    pub cw_rcs: f64,
    /// Event-level mean.
    pub temporal_hm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub k: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn render(&self) -> String {
        let k = self.k;
        let mut out = format!(
            "{:<14}  {:>8}  {:>7}  {:>10}\n",
            self.axis,
            format!("Top@{k}R"),
            format!("CW@{k}"),
            format!("TempHM@{k}")
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14}  {:>8.3}  {:>7.3}  {:>10.3}",
                r.value, r.top_k_recall, r.cw_rcs, r.temporal_hm
            );
        }
        out
    }
}
