//! Library-level pipeline checks: artifacts, leakage, reports.

use std::collections::BTreeSet;

use rca_bench::config::{DataSource, DetectorSpec, RunConfig};
use rca_bench::pipeline::{attribute_window_full, build_index, explanation_window};
use rca_bench::scenario::{EventPlan, SynthScenario};
use rca_bench::{evaluate, prepare, train, Artifacts};
use rca_core::data::sliding_windows;
use rca_core::detector::Scorer;
use rca_core::metrics::{recall_at_k, RankedAttribution};

fn small() -> RunConfig {
    RunConfig {
        data: DataSource::Synth(SynthScenario {
            length: 3000,
            train_length: 1200,
            events: EventPlan {
                per_kind: 1,
                min_gap: 60,
                ..EventPlan::default()
            },
            ..SynthScenario::default()
        }),
        w: 20,
        detector: DetectorSpec::Pca { components: 8 },
        metric_ks: vec![1, 3],
        ..RunConfig::default()
    }
}

#[test]
fn reloaded_artifacts_score_identically() {
    let config = small();
    let prepared = prepare(&config).unwrap();
    let artifacts = train(&config, &prepared).unwrap();
    let dir = tempfile::tempdir().unwrap();
    artifacts.save(&config, dir.path()).unwrap();
    let back = Artifacts::load(&config, dir.path()).unwrap();
    assert_eq!(back.threshold, artifacts.threshold);
    let windows = sliding_windows(&prepared.dataset.series, config.w, 17).unwrap();
    assert!(windows.len() >= 100);
    for win in windows.iter().take(100) {
        let a = artifacts.detector.score(win.data.view()).unwrap();
        let b = back.detector.score(win.data.view()).unwrap();
        assert!((a - b).abs() <= 1e-12, "window {}: {a} vs {b}", win.start);
    }
    let other = RunConfig { w: 30, ..config };
    assert!(Artifacts::load(&other, dir.path()).is_err());
}

#[test]
fn training_range_may_not_touch_events() {
    let config = RunConfig {
        train_range: Some([0, 2000]),
        ..small()
    };
    let err = prepare(&config).unwrap_err();
    assert!(format!("{err:#}").contains("overlaps"), "{err:#}");
}

#[test]
fn report_aggregates_follow_from_per_window_records() {
    let config = small();
    let prepared = prepare(&config).unwrap();
    let report = evaluate(&config, &prepared, &train(&config, &prepared).unwrap(), 1).unwrap();
    assert_eq!(report.events.len(), prepared.dataset.events.len());
    let truths: Vec<BTreeSet<usize>> = prepared.dataset.events.iter().map(|e| e.ground_truth.clone()).collect();
    for k in [1, 3] {
        let (mut all, mut per_event) = (Vec::new(), Vec::new());
        for (rec, truth) in report.events.iter().zip(&truths) {
            let recalls: Vec<f64> = rec
                .windows
                .iter()
                .map(|w| {
                    let r = RankedAttribution::from_values(&w.attribution, false).unwrap();
                    recall_at_k(&r, truth, k).unwrap()
                })
                .collect();
            per_event.push(recalls.iter().sum::<f64>() / recalls.len() as f64);
            all.extend(recalls);
        }
        let ds = &report.metrics.dataset;
        let window_mean = all.iter().sum::<f64>() / all.len() as f64;
        let event_mean = per_event.iter().sum::<f64>() / per_event.len() as f64;
        assert!((ds.window_level.recall[&k] - window_mean).abs() < 1e-12);
        assert!((ds.event_level.recall[&k] - event_mean).abs() < 1e-12);
        assert_eq!(ds.window_level.n, all.len());
        for (ev, mean) in report.metrics.per_event.iter().zip(&per_event) {
            assert!((ev.recall[&k] - mean).abs() < 1e-12);
            assert!(ev.cw_rcs[&k] <= ev.recall[&k]);
        }
    }
}

#[test]
fn table_marks_unidentified_events() {
    let config = small();
    let prepared = prepare(&config).unwrap();
    let mut report = evaluate(&config, &prepared, &train(&config, &prepared).unwrap(), 1).unwrap();
    report.metrics.per_event[0].identified.insert(3, BTreeSet::new());
    let table = report.table(3);
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].contains("Top@3R") && lines[0].ends_with("FeatureID"));
    assert!(lines[1].trim_end().ends_with("---"), "{}", lines[1]);
    assert_eq!(lines.len(), 1 + report.events.len() + 2);
    assert!(lines[lines.len() - 2].trim_start().starts_with("window"));
    assert!(lines[lines.len() - 1].trim_start().starts_with("event"));
}

#[test]
fn shift_on_default_scenario_ranks_its_sensor_first() {
    let config = RunConfig::default();
    let prepared = prepare(&config).unwrap();
    let artifacts = train(&config, &prepared).unwrap();
    let index = build_index(&config, &prepared, &artifacts).unwrap();
    let kinds = prepared.kinds.as_ref().unwrap();
    let e = kinds.iter().position(|k| k.to_string() == "shift").unwrap();
    let start = explanation_window(&config, &prepared, &artifacts, e).unwrap();
    let out = attribute_window_full(&config, &prepared, &artifacts, &index, start).unwrap();
    let truth = &prepared.dataset.events[e].ground_truth;
    let sensor = &prepared.sensor_names()[*truth.iter().next().unwrap()];
    assert_eq!(&out.ranking[0], sensor);
    assert!(out.flagged);
}
