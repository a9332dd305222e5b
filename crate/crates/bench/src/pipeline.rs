//! End-to-end runs: normalize, train, calibrate, retrieve, attribute, score.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use rayon::prelude::*;
use rca_core::attribution::{
    attribution_tensor, donors, sensor_attribution_with_donors, AttributionTensor, SensorAttribution,
};
use rca_core::data::{
    apply_normalization, check_disjoint, fit_normalization, load_csv, load_labels, windows_of_event,
    write_atomic, LabeledDataset, NormalizationStats, SeriesMatrix, Window, DEFAULT_STD_FLOOR,
};
use rca_core::detector::{
    choose_threshold, detection_metrics, train_ae_detector, train_pca_detector, AeArchitecture, Detector,
    DetectorModel, ExternalCommand, ExternalDetector, Scorer,
};
use rca_core::embedding::{fit_pca_embedding, import_embeddings, train_vae, Embedding, VaeArchitecture, VaeWeights};
use rca_core::metrics::{evaluate_dataset, evaluate_event, RankedAttribution};
use rca_core::nn::{Activation, OptimizerKind, TrainConfig};
use rca_core::retrieval::{normal_windows, windows_in, NeighborIndex, SearchSpace};
use rca_core::synth::AnomalyKind;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, DetectorSpec, RetrievalSpace, RunConfig, TimestepRanking};
use crate::report::{DetectorSummary, EventRecord, RunReport, Timings, WindowRecord};

/// Windows scored per batch during detection; fixed so results do not
/// depend on the worker count.
const SCORE_CHUNK: usize = 256;
const ARTIFACT_FORMAT: &str = "rca-artifacts";
const ARTIFACT_VERSION: u32 = 1;

/// Normalized dataset plus what is needed to map back to raw units.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub raw: SeriesMatrix,
    pub stats: NormalizationStats,
    pub dataset: LabeledDataset,
    /// Fault kind per event, known for synthetic data only.
    pub kinds: Option<Vec<AnomalyKind>>,
}

impl Prepared {
    pub fn sensor_names(&self) -> &[String] {
        self.dataset.series.sensor_names()
    }
}

/// Load or generate the data, fit z-scores on the training range and check
/// that no normal range touches a labeled event.
pub fn prepare(config: &RunConfig) -> anyhow::Result<Prepared> {
    config.validate()?;
    let train = config.train_range()?;
    let (raw, events, kinds) = match &config.data {
        DataSource::Csv {
            series,
            labels,
            has_timestamp,
        } => {
            let raw = load_csv(series, *has_timestamp)?;
            let events = match labels {
                Some(p) => load_labels(p, &raw)?,
                None => Vec::new(),
            };
            (raw, events, None)
        }
        DataSource::Synth(scenario) => {
            let suite = scenario.build()?;
            (suite.series, suite.events, Some(suite.kinds))
        }
    };
    check_disjoint(&train, &events)?;
    check_disjoint(&config.threshold_range()?, &events)?;
    if train.is_empty() || train.end > raw.len() {
        bail!("train range {train:?} invalid for series of length {}", raw.len());
    }
    let stats = fit_normalization(&raw, train.clone(), DEFAULT_STD_FLOOR)?;
    let normalized = apply_normalization(&raw, &stats)?;
    let dataset = LabeledDataset::new(normalized, events, train)?;
    Ok(Prepared {
        raw,
        stats,
        dataset,
        kinds,
    })
}

/// Trained models and the calibrated threshold.
#[derive(Debug)]
pub struct Artifacts {
    pub detector: Detector,
    pub embedding: Option<Embedding>,
    pub threshold: f64,
    pub stats: NormalizationStats,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactManifest {
    format: String,
    version: u32,
    w: usize,
    detector: String,
    retrieval: RetrievalSpace,
    threshold: f64,
    stats: NormalizationStats,
}

fn train_config(lr: f64, epochs: usize, batch: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size: batch,
        seed,
        optimizer: OptimizerKind::adam(),
    }
}

fn build_detector(config: &RunConfig, normal: &[Window], w: usize, d: usize) -> anyhow::Result<Detector> {
    Ok(match &config.detector {
        DetectorSpec::Pca { components } => train_pca_detector(normal, *components)?,
        DetectorSpec::Ae {
            hidden,
            epochs,
            learning_rate,
            batch_size,
        } => {
            let arch = AeArchitecture {
                hidden: hidden.clone(),
                activation: Activation::Tanh,
            };
            train_ae_detector(normal, &arch, &train_config(*learning_rate, *epochs, *batch_size, config.seed))?
        }
        DetectorSpec::External { program, args } => {
            let cmd = ExternalCommand {
                program: program.clone(),
                args: args.clone(),
            };
            Detector::new(DetectorModel::External(ExternalDetector::start(cmd, w, d)?))
        }
    })
}

fn build_embedding(config: &RunConfig, normal: &[Window]) -> anyhow::Result<Option<Embedding>> {
    let spec = &config.embedding;
    Ok(match config.retrieval {
        RetrievalSpace::Input => None,
        RetrievalSpace::Pca => Some(fit_pca_embedding(normal, spec.pca_dim)?),
        RetrievalSpace::Vae => {
            let arch = VaeArchitecture {
                hidden: spec.vae_hidden.clone(),
                latent_dim: spec.vae_latent,
                activation: Activation::Tanh,
            };
            let cfg = train_config(
                spec.vae_learning_rate,
                spec.vae_epochs,
                spec.vae_batch_size,
                config.seed ^ 0x7ae0_5eed,
            );
            Some(train_vae(normal, &arch, VaeWeights::default(), &cfg)?.0)
        }
        RetrievalSpace::Imported => {
            let path = spec.imported.as_ref().context("imported retrieval needs embedding.imported")?;
            Some(import_embeddings(path)?)
        }
    })
}

/// Fit the detector and embedding on normal windows and set the threshold
/// from normal window scores.
pub fn train(config: &RunConfig, prepared: &Prepared) -> anyhow::Result<Artifacts> {
    let ds = &prepared.dataset;
    let normal = normal_windows(ds, config.w, config.stride)?;
    let detector = build_detector(config, &normal, config.w, ds.series.n_sensors())?;
    let embedding = build_embedding(config, &normal)?;
    let calibration = windows_in(ds, &config.threshold_range()?, config.w, 1)?;
    let scores = score_windows(&detector, &calibration)?;
    let threshold = choose_threshold(&scores, config.threshold_quantile)?;
    Ok(Artifacts {
        detector,
        embedding,
        threshold,
        stats: prepared.stats.clone(),
    })
}

fn score_windows(detector: &dyn Scorer, windows: &[Window]) -> anyhow::Result<Vec<f64>> {
    let chunks: Vec<Vec<f64>> = windows
        .par_chunks(SCORE_CHUNK)
        .map(|chunk| {
            let data: Vec<_> = chunk.iter().map(|w| w.data.clone()).collect();
            detector.score_batch(&data)
        })
        .collect::<Result<_, _>>()?;
    Ok(chunks.concat())
}

impl Artifacts {
    /// Writes `detector.json`, `embedding.json` (when present) and
    /// `manifest.json` into `dir`.
    pub fn save(&self, config: &RunConfig, dir: impl AsRef<Path>) -> anyhow::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        self.detector.save(dir.join("detector.json"))?;
        let emb_path = dir.join("embedding.json");
        match &self.embedding {
            Some(e) => e.save(&emb_path)?,
            None if emb_path.exists() => std::fs::remove_file(&emb_path)?,
            None => {}
        }
        let manifest = ArtifactManifest {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            w: config.w,
            detector: self.detector.kind().into(),
            retrieval: config.retrieval,
            threshold: self.threshold,
            stats: self.stats.clone(),
        };
        write_atomic(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(())
    }

    pub fn load(config: &RunConfig, dir: impl AsRef<Path>) -> anyhow::Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.json"))
            .with_context(|| format!("reading artifacts in {}", dir.display()))?;
        let manifest: ArtifactManifest = serde_json::from_str(&text)?;
        if manifest.format != ARTIFACT_FORMAT || manifest.version != ARTIFACT_VERSION {
            bail!("{} is not a v{ARTIFACT_VERSION} artifact directory", dir.display());
        }
        if manifest.w != config.w || manifest.retrieval != config.retrieval {
            bail!(
                "artifacts were trained with w={}, retrieval={}; config has w={}, retrieval={}",
                manifest.w,
                manifest.retrieval.as_str(),
                config.w,
                config.retrieval.as_str()
            );
        }
        let detector = Detector::load(dir.join("detector.json"))?;
        let embedding = match config.retrieval {
            RetrievalSpace::Input => None,
            _ => Some(Embedding::load(dir.join("embedding.json"))?),
        };
        Ok(Self {
            detector,
            embedding,
            threshold: manifest.threshold,
            stats: manifest.stats,
        })
    }
}

/// Reference index over the training windows.
pub fn build_index(config: &RunConfig, prepared: &Prepared, artifacts: &Artifacts) -> anyhow::Result<NeighborIndex> {
    let space = match &artifacts.embedding {
        Some(e) => SearchSpace::Embedded(e.clone()),
        None => SearchSpace::Input,
    };
    Ok(rca_core::retrieval::build_index(
        &prepared.dataset,
        config.w,
        config.stride,
        space,
    )?)
}

pub fn thread_pool(jobs: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

struct WindowOutcome {
    attribution: SensorAttribution,
    score: f64,
    retrieval: f64,
    scoring: f64,
}

fn attribute_window(
    config: &RunConfig,
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
) -> anyhow::Result<WindowOutcome> {
    let conditioning = config.conditioning();
    let t0 = Instant::now();
    let ids = (0..window.n_sensors())
        .map(|j| donors(index, window, j, config.k, conditioning))
        .collect::<Result<Vec<_>, _>>()?;
    let t1 = Instant::now();
    let attribution = sensor_attribution_with_donors(detector, index, window, &ids, conditioning.name())?;
    let score = detector.score(window.data.view())?;
    Ok(WindowOutcome {
        attribution,
        score,
        retrieval: (t1 - t0).as_secs_f64(),
        scoring: t1.elapsed().as_secs_f64(),
    })
}

/// Attribution tensor of one window with the configured settings.
pub fn window_tensor(
    config: &RunConfig,
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
) -> anyhow::Result<AttributionTensor> {
    Ok(attribution_tensor(
        detector,
        index,
        window,
        config.segment,
        config.k,
        config.conditioning(),
    )?)
}

/// Start of the stride-1 window ending at `t`, clamped to the series.
pub fn window_ending_at(t: usize, w: usize, len: usize) -> usize {
    (t + 1).saturating_sub(w).min(len - w)
}

fn ranking(config: &RunConfig, values: &[f64]) -> anyhow::Result<RankedAttribution> {
    Ok(RankedAttribution::from_values(values, config.signed_ranking)?)
}

/// Evaluate every labeled event. `jobs` sets the worker count; the report
/// does not depend on it.
pub fn evaluate(
    config: &RunConfig,
    prepared: &Prepared,
    artifacts: &Artifacts,
    jobs: usize,
) -> anyhow::Result<RunReport> {
    let pool = thread_pool(jobs)?;
    pool.install(|| evaluate_in_pool(config, prepared, artifacts, jobs))
}

fn evaluate_in_pool(
    config: &RunConfig,
    prepared: &Prepared,
    artifacts: &Artifacts,
    jobs: usize,
) -> anyhow::Result<RunReport> {
    let started = Instant::now();
    let ds = &prepared.dataset;
    if ds.events.is_empty() {
        bail!("no labeled events to evaluate");
    }
    let (len, w) = (ds.series.len(), config.w);
    let detector: &dyn Scorer = &artifacts.detector;
    let settings = config.metric_settings();
    let mut timings = Timings {
        jobs,
        ..Timings::default()
    };

    let t = Instant::now();
    let index = build_index(config, prepared, artifacts)?;
    timings.index_seconds = t.elapsed().as_secs_f64();

    // Window-level detection quality outside the normal ranges.
    let t = Instant::now();
    let train = ds.train_range.clone();
    let calib = config.threshold_range()?;
    let test_windows: Vec<Window> = (0..=len - w)
        .filter(|&s| {
            let span = s..s + w;
            !overlaps(&span, &train) && !overlaps(&span, &calib)
        })
        .map(|s| Window::from_series(&ds.series, s, w))
        .collect::<Result<_, _>>()?;
    let test_scores = score_windows(detector, &test_windows)?;
    let labels: Vec<bool> = test_windows
        .iter()
        .map(|win| ds.events.iter().any(|e| e.intersects(&win.span())))
        .collect();
    let flags: Vec<bool> = test_scores.iter().map(|&s| s > artifacts.threshold).collect();
    let detection = detection_metrics(&test_scores, &flags, &labels)?;
    timings.detection_seconds = t.elapsed().as_secs_f64();

    // Whole-window attribution of every window touching an event.
    let event_windows: Vec<Vec<Window>> = ds
        .events
        .iter()
        .map(|e| windows_of_event(ds, e, w, 1))
        .collect::<Result<_, _>>()?;
    let jobs_list: Vec<(usize, &Window)> = event_windows
        .iter()
        .enumerate()
        .flat_map(|(e, ws)| ws.iter().map(move |win| (e, win)))
        .collect();
    let outcomes: Vec<WindowOutcome> = jobs_list
        .par_iter()
        .map(|(_, win)| attribute_window(config, detector, &index, win))
        .collect::<anyhow::Result<_>>()?;
    for o in &outcomes {
        timings.retrieval_seconds += o.retrieval;
        timings.scoring_seconds += o.scoring;
    }
    let mut per_event: Vec<Vec<WindowOutcome>> = event_windows.iter().map(|_| Vec::new()).collect();
    for ((e, _), o) in jobs_list.iter().zip(outcomes) {
        per_event[*e].push(o);
    }

    // Onset localization on the first detecting window of each event.
    let t = Instant::now();
    let onset_tensors: Vec<Option<AttributionTensor>> = per_event
        .par_iter()
        .zip(&event_windows)
        .map(|(outs, wins)| {
            match outs.iter().position(|o| o.score > artifacts.threshold) {
                Some(i) => window_tensor(config, detector, &index, &wins[i]).map(Some),
                None => Ok(None),
            }
        })
        .collect::<anyhow::Result<_>>()?;

    let timestep_tensors: Vec<Option<BTreeMap<usize, Vec<f64>>>> = match config.timestep_ranking {
        TimestepRanking::Window => vec![None; ds.events.len()],
        TimestepRanking::Tensor => ds
            .events
            .par_iter()
            .map(|e| {
                let mut rows = BTreeMap::new();
                for t in e.interval() {
                    let start = window_ending_at(t, w, len);
                    let win = Window::from_series(&ds.series, start, w)?;
                    let tensor = window_tensor(config, detector, &index, &win)?;
                    rows.insert(t, tensor.values.row(t - start).to_vec());
                }
                Ok(Some(rows))
            })
            .collect::<anyhow::Result<_>>()?,
    };
    timings.tensor_seconds = t.elapsed().as_secs_f64();

    let names = prepared.sensor_names();
    let mut evaluations = Vec::with_capacity(ds.events.len());
    let mut records = Vec::with_capacity(ds.events.len());
    for (e, event) in ds.events.iter().enumerate() {
        let outs = &per_event[e];
        let by_start: BTreeMap<usize, &WindowOutcome> =
            outs.iter().map(|o| (o.attribution.window_start, o)).collect();
        let windows = outs
            .iter()
            .map(|o| Ok((o.attribution.window_start, ranking(config, &o.attribution.values)?)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let per_timestep = event
            .interval()
            .map(|t| match &timestep_tensors[e] {
                Some(rows) => ranking(config, &rows[&t]),
                None => {
                    let start = window_ending_at(t, w, len);
                    let o = by_start
                        .get(&start)
                        .with_context(|| format!("no window ending at {t}"))?;
                    ranking(config, &o.attribution.values)
                }
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        evaluations.push(evaluate_event(event, windows, &per_timestep, &settings)?);

        let onset_estimate = onset_tensors[e].as_ref().map(|t| t.window_start + t.peak_offset());
        let detected_at = onset_tensors[e].as_ref().map(|t| t.window_start + w - 1);
        records.push(EventRecord {
            id: e + 1,
            kind: prepared.kinds.as_ref().map(|k| k[e].to_string()),
            onset: event.onset,
            duration: event.duration,
            sensors: event.ground_truth.iter().map(|&j| names[j].clone()).collect(),
            detected_at,
            onset_estimate,
            windows: outs
                .iter()
                .map(|o| WindowRecord {
                    start: o.attribution.window_start,
                    score: o.score,
                    flagged: o.score > artifacts.threshold,
                    attribution: o.attribution.values.clone(),
                })
                .collect(),
        });
    }
    let metrics = evaluate_dataset(&evaluations)?;
    timings.total_seconds = started.elapsed().as_secs_f64();

    Ok(RunReport {
        config: config.clone(),
        sensor_names: names.to_vec(),
        detector: DetectorSummary {
            kind: artifacts.detector.kind().into(),
            threshold: artifacts.threshold,
            n_windows: test_windows.len(),
            n_anomalous: labels.iter().filter(|&&l| l).count(),
            n_flagged: flags.iter().filter(|&&f| f).count(),
            metrics: detection,
        },
        events: records,
        metrics,
        timings: Some(timings),
    })
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Heatmap and ranking for one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowAttribution {
    pub window_start: usize,
    pub score: f64,
    pub flagged: bool,
    pub attribution: Vec<f64>,
    /// Sensor names, most responsible first.
    pub ranking: Vec<String>,
    pub tensor: AttributionTensor,
}

pub fn attribute_window_full(
    config: &RunConfig,
    prepared: &Prepared,
    artifacts: &Artifacts,
    index: &NeighborIndex,
    start: usize,
) -> anyhow::Result<WindowAttribution> {
    let ds = &prepared.dataset;
    let win = Window::from_series(&ds.series, start, config.w)?;
    let o = attribute_window(config, &artifacts.detector, index, &win)?;
    let tensor = window_tensor(config, &artifacts.detector, index, &win)?;
    let ranked = ranking(config, &o.attribution.values)?;
    let names = prepared.sensor_names();
    Ok(WindowAttribution {
        window_start: start,
        score: o.score,
        flagged: o.score > artifacts.threshold,
        attribution: o.attribution.values,
        ranking: ranked.ranking.iter().map(|&j| names[j].clone()).collect(),
        tensor,
    })
}

/// Window used to explain event `e` (0-based): the first flagged window
/// touching it, else the window ending at the event's last timestep.
pub fn explanation_window(
    config: &RunConfig,
    prepared: &Prepared,
    artifacts: &Artifacts,
    e: usize,
) -> anyhow::Result<usize> {
    let ds = &prepared.dataset;
    let event = ds
        .events
        .get(e)
        .with_context(|| format!("event {} not in 1..={}", e + 1, ds.events.len()))?;
    for win in windows_of_event(ds, event, config.w, 1)? {
        if artifacts.detector.score(win.data.view())? > artifacts.threshold {
            return Ok(win.start);
        }
    }
    Ok(window_ending_at(event.interval().end - 1, config.w, ds.series.len()))
}
