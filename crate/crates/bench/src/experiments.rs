//! Ablation sweeps and the stand-alone retrieval-cost and bias-bound probes.

use anyhow::{bail, ensure};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rca_core::attribution::{check_bias_bound, BiasBoundReport};
use rca_core::data::{apply_normalization, fit_normalization, sliding_windows, Window, DEFAULT_STD_FLOOR};
use rca_core::detector::LinearDetector;
use rca_core::embedding::fit_pca_embedding;
use rca_core::retrieval::{query_cost_probe, CostProbeReport, NeighborIndex, SearchSpace};
use rca_core::synth::{generate, LatentFactorSystem};
use serde::{Deserialize, Serialize};

use crate::config::{ConditioningMode, RetrievalSpace, RunConfig};
use crate::pipeline::{evaluate, prepare, train, Artifacts, Prepared};
use crate::report::{RunReport, SweepRow, SweepTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    WindowSize,
    AttributionSize,
    RetrievalSpace,
    Conditioning,
}

impl std::str::FromStr for SweepAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Ok(match s {
            "window_size" | "w" => SweepAxis::WindowSize,
            "attribution_size" | "k" => SweepAxis::AttributionSize,
            "retrieval_space" | "retrieval" => SweepAxis::RetrievalSpace,
            "conditioning" => SweepAxis::Conditioning,
            _ => bail!("unknown sweep axis '{s}' (window_size, attribution_size, retrieval_space, conditioning)"),
        })
    }
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::WindowSize => "window_size",
            SweepAxis::AttributionSize => "attribution_size",
            SweepAxis::RetrievalSpace => "retrieval_space",
            SweepAxis::Conditioning => "conditioning",
        }
    }

    /// Values used when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::WindowSize => &["5", "10", "20", "50", "100"],
            SweepAxis::AttributionSize => &["1", "2", "3", "4", "5", "10"],
            SweepAxis::RetrievalSpace => &["input", "pca"],
            SweepAxis::Conditioning => &["conditional", "unconditional"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    fn retrains(self) -> bool {
        matches!(self, SweepAxis::WindowSize | SweepAxis::RetrievalSpace)
    }

    fn apply(self, config: &RunConfig, value: &str) -> anyhow::Result<RunConfig> {
        let mut c = config.clone();
        match self {
            SweepAxis::WindowSize => {
                c.w = value.parse()?;
                c.segment = c.segment.min(c.w);
            }
            SweepAxis::AttributionSize => c.k = value.parse()?,
            SweepAxis::RetrievalSpace => c.retrieval = value.parse::<RetrievalSpace>()?,
            SweepAxis::Conditioning => c.conditioning = value.parse::<ConditioningMode>()?,
        }
        c.validate()?;
        Ok(c)
    }
}

fn sweep_row(value: &str, report: &RunReport, k: usize) -> SweepRow {
    let ds = &report.metrics.dataset;
    let get = |m: &std::collections::BTreeMap<usize, f64>| m.get(&k).copied().unwrap_or(0.0);
    SweepRow {
        value: value.to_string(),
        top_k_recall: get(&ds.window_level.recall),
        cw_rcs: get(&ds.window_level.cw_rcs),
        temporal_hm: get(&ds.event_level.temporal_hm),
    }
}

/// One evaluation per value along `axis`, sharing the data and, when the
/// axis allows it, the trained models.
pub fn sweep(config: &RunConfig, axis: SweepAxis, values: &[String], jobs: usize) -> anyhow::Result<SweepTable> {
    ensure!(!values.is_empty(), "sweep needs at least one value");
    let prepared = prepare(config)?;
    let shared: Option<Artifacts> = if axis.retrains() {
        None
    } else {
        Some(train(config, &prepared)?)
    };
    let k = config.metric_ks[0];
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let c = axis.apply(config, v)?;
        let report = match &shared {
            Some(a) => evaluate(&c, &prepared, a, jobs)?,
            None => evaluate(&c, &prepared, &train(&c, &prepared)?, jobs)?,
        };
        rows.push(sweep_row(v, &report, k));
    }
    Ok(SweepTable {
        axis: axis.as_str().into(),
        k,
        rows,
    })
}

/// Evaluate with shared data and models under two conditioning modes.
pub fn paired_conditioning(
    config: &RunConfig,
    prepared: &Prepared,
    artifacts: &Artifacts,
    jobs: usize,
) -> anyhow::Result<(RunReport, RunReport)> {
    let cond = RunConfig {
        conditioning: ConditioningMode::Conditional,
        ..config.clone()
    };
    let marg = RunConfig {
        conditioning: ConditioningMode::Unconditional,
        ..config.clone()
    };
    Ok((
        evaluate(&cond, prepared, artifacts, jobs)?,
        evaluate(&marg, prepared, artifacts, jobs)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSpec {
    pub n_references: usize,
    pub w: usize,
    pub d: usize,
    pub embedding_dim: usize,
    pub queries: usize,
    pub repetitions: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            n_references: 10_000,
            w: 50,
            d: 10,
            embedding_dim: 8,
            queries: 20,
            repetitions: 5,
            k: 3,
            seed: 0,
        }
    }
}

fn latent_windows(d: usize, w: usize, n: usize, seed: u64) -> anyhow::Result<Vec<Window>> {
    let r = if d > 2 { 2 } else { 1 };
    let sys = LatentFactorSystem::grouped(d, r, 0.95, 0.1, seed)?;
    let raw = generate(&sys, (n + w - 1).max(2))?;
    let stats = fit_normalization(&raw, 0..raw.len(), DEFAULT_STD_FLOOR)?;
    Ok(sliding_windows(&apply_normalization(&raw, &stats)?, w, 1)?)
}

/// Per-query cost of input-space vs embedded conditional KNN over
/// `n_references` latent-factor windows with a PCA embedding.
pub fn cost_probe(spec: &ProbeSpec) -> anyhow::Result<CostProbeReport> {
    ensure!(spec.d >= 2 && spec.queries >= 1, "probe needs d >= 2 and a query");
    let mut all = latent_windows(spec.d, spec.w, spec.n_references + spec.queries, spec.seed)?;
    let tail = all.split_off(spec.n_references);
    let sample: Vec<Window> = all.iter().step_by(5).cloned().collect();
    let embedding = fit_pca_embedding(&sample, spec.embedding_dim)?;
    let index = NeighborIndex::from_windows(all, SearchSpace::Embedded(embedding))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9_0be);
    let queries: Vec<(Window, usize)> = tail
        .into_iter()
        .map(|q| {
            let j = rng.random_range(0..spec.d);
            (q, j)
        })
        .collect();
    // one untimed pass warms caches
    query_cost_probe(&index, &queries, spec.k, 1)?;
    Ok(query_cost_probe(&index, &queries, spec.k, spec.repetitions)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundSpec {
    pub trials: usize,
    pub d: usize,
    pub w: usize,
    /// Donors per attribution.
    pub k: usize,
    pub n_references: usize,
    pub seed: u64,
}

impl Default for BoundSpec {
    fn default() -> Self {
        Self {
            trials: 100,
            d: 10,
            w: 20,
            k: 8,
            n_references: 500,
            seed: 0,
        }
    }
}

/// Random linear detectors, queries and sensors; one bias-bound check each.
pub fn bound_trials(spec: &BoundSpec) -> anyhow::Result<Vec<BiasBoundReport>> {
    ensure!(spec.d >= 2, "bound trials need d >= 2");
    let mut all = latent_windows(spec.d, spec.w, spec.n_references + 200, spec.seed)?;
    let queries = all.split_off(spec.n_references);
    let index = NeighborIndex::from_windows(all, SearchSpace::Input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xb0_0d);
    (0..spec.trials)
        .map(|trial| {
            let det = LinearDetector {
                weights: Array2::from_shape_simple_fn((spec.w, spec.d), || rng.random_range(-1.0..1.0)),
                bias: rng.random_range(-1.0..1.0),
            };
            let q = &queries[rng.random_range(0..queries.len())];
            let j = rng.random_range(0..spec.d);
            Ok(check_bias_bound(&det, &index, q, j, spec.k, spec.seed.wrapping_add(trial as u64))?)
        })
        .collect()
}
