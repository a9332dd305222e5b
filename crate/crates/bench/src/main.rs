use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rca_core::attribution::export_heatmap;
use rca_core::data::{labels_to_json, load_csv, save_csv, write_atomic};
use rca_core::synth::InjectionRequest;
use rca_bench::config::{resolve_jobs, ConditioningMode, DataSource, RetrievalSpace, RunConfig, JOBS_ENV};
use rca_bench::experiments::{bound_trials, cost_probe, sweep, BoundSpec, ProbeSpec, SweepAxis};
use rca_bench::pipeline::{attribute_window_full, build_index, explanation_window, thread_pool};
use rca_bench::scenario::{inject_batch, inject_requests, EventPlan};
use rca_bench::{evaluate, prepare, train, Artifacts};
use serde::Deserialize;

/// Conditional counterfactual root cause attribution benchmark
#[derive(Parser, Debug)]
#[command(name = "rca-bench", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inject faults into a CSV series, or generate the configured synthetic suite
    Inject(InjectArgs),
    /// Train detector and embedding on the normal range and save them
    Train(TrainArgs),
    /// Heatmaps and sensor rankings for selected events or windows
    Attribute(AttributeArgs),
    /// Evaluate every labeled event and print the per-event table
    Evaluate(EvaluateArgs),
    /// Rerun the evaluation along one ablation axis
    Sweep(SweepArgs),
    /// Time input-space vs embedded-space conditional KNN
    ProbeCost(ProbeArgs),
    /// Check the conditional/marginal bias bound on random linear detectors
    CheckBound(BoundArgs),
}

/// Config file plus field overrides.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Run configuration (JSON); defaults are used when omitted
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    w: Option<usize>,
    /// Donors per attribution
    #[arg(long)]
    k: Option<usize>,
    /// Temporal segment length
    #[arg(long)]
    segment: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// input, pca, vae or imported
    #[arg(long)]
    retrieval: Option<RetrievalSpace>,
    /// conditional, unconditional or shared
    #[arg(long)]
    conditioning: Option<ConditioningMode>,
    #[arg(long, value_delimiter = ',')]
    metric_ks: Option<Vec<usize>>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.w {
            c.w = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.segment {
            c.segment = v;
        }
        if let Some(v) = self.stride {
            c.stride = v;
        }
        if let Some(v) = self.retrieval {
            c.retrieval = v;
        }
        if let Some(v) = self.conditioning {
            c.conditioning = v;
        }
        if let Some(v) = &self.metric_ks {
            c.metric_ks = v.clone();
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.eps {
            c.eps = v;
        }
        if let Some(v) = self.quantile {
            c.threshold_quantile = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct InjectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Clean series; when omitted the configured synthetic suite is written
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    has_timestamp: bool,
    /// Clean range `start:end` whose σ scales magnitudes
    #[arg(long, value_parser = parse_range)]
    reference: Option<[usize; 2]>,
    /// Injection spec: one request, a list, or {"batch": {...}, "seed": n}
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out_series: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Artifact directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Trained artifacts; models are trained in memory when omitted
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// Report JSON (timings excluded)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Timing breakdown JSON
    #[arg(long)]
    timings: Option<PathBuf>,
    /// Metric depth shown in the table (default: first metric K)
    #[arg(long)]
    table_k: Option<usize>,
    #[arg(long, env = JOBS_ENV)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct AttributeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// 1-based event ids; all events when neither this nor --window is given
    #[arg(long, value_delimiter = ',')]
    events: Vec<usize>,
    /// Explicit window starts
    #[arg(long, value_delimiter = ',')]
    window: Vec<usize>,
    /// Output directory for heatmaps and rankings.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = JOBS_ENV)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// window_size, attribution_size, retrieval_space or conditioning
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = JOBS_ENV)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long, default_value_t = 10_000)]
    n_references: usize,
    #[arg(long, default_value_t = 50)]
    w: usize,
    #[arg(long, default_value_t = 10)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 20)]
    queries: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 10)]
    d: usize,
    #[arg(long, default_value_t = 20)]
    w: usize,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 500)]
    n_references: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write every trial as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s
        .split_once(':')
        .or_else(|| s.split_once(".."))
        .ok_or_else(|| format!("expected start:end, got '{s}'"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{e}"))?;
    if a >= b {
        return Err(format!("empty range {a}:{b}"));
    }
    Ok([a, b])
}

#[derive(Deserialize)]
#[serde(untagged)]
enum InjectFile {
    Batch {
        batch: EventPlan,
        #[serde(default)]
        seed: u64,
    },
    List(Vec<InjectionRequest>),
    One(InjectionRequest),
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn cmd_inject(args: InjectArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let (series, events) = match &args.input {
        None => {
            let DataSource::Synth(scenario) = &config.data else {
                bail!("no --input and the config has no synthetic scenario");
            };
            let suite = scenario.build()?;
            (suite.series, suite.events)
        }
        Some(input) => {
            let clean = load_csv(input, args.has_timestamp)?;
            let [a, b] = match args.reference {
                Some(r) => r,
                None => config.train_range.context("--reference or train_range is required")?,
            };
            let spec_path = args.spec.as_ref().context("--spec is required with --input")?;
            let text = std::fs::read_to_string(spec_path)
                .with_context(|| format!("reading {}", spec_path.display()))?;
            match serde_json::from_str::<InjectFile>(&text).context("parsing injection spec")? {
                InjectFile::Batch { batch, seed } => {
                    let (s, e, _) = inject_batch(&clean, a..b, &batch, seed)?;
                    (s, e)
                }
                InjectFile::List(reqs) => inject_requests(&clean, a..b, &reqs)?,
                InjectFile::One(req) => inject_requests(&clean, a..b, &[req])?,
            }
        }
    };
    save_csv(&series, &args.out_series)?;
    write_atomic(
        &args.out_labels,
        labels_to_json(&events, series.sensor_names())?.as_bytes(),
    )?;
    println!(
        "wrote {} rows x {} sensors and {} events",
        series.len(),
        series.n_sensors(),
        events.len()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let prepared = prepare(&config)?;
    let artifacts = train(&config, &prepared)?;
    artifacts.save(&config, &args.out)?;
    write_atomic(args.out.join("config.json"), config.to_json().as_bytes())?;
    println!(
        "trained {} detector (threshold {:.4}) into {}",
        artifacts.detector.kind(),
        artifacts.threshold,
        args.out.display()
    );
    Ok(())
}

fn load_or_train(
    config: &RunConfig,
    prepared: &rca_bench::Prepared,
    dir: Option<&PathBuf>,
) -> anyhow::Result<Artifacts> {
    match dir {
        Some(d) => Artifacts::load(config, d),
        None => train(config, prepared),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let jobs = resolve_jobs(args.jobs)?;
    let prepared = prepare(&config)?;
    let artifacts = load_or_train(&config, &prepared, args.artifacts.as_ref())?;
    let report = evaluate(&config, &prepared, &artifacts, jobs)?;
    print!("{}", report.table(args.table_k.unwrap_or(config.metric_ks[0])));
    print!("{}", report.summary());
    if let Some(p) = &args.out {
        write_atomic(p, report.canonical_json().as_bytes())?;
    }
    if let (Some(p), Some(t)) = (&args.timings, &report.timings) {
        write_json(p, t)?;
    }
    Ok(())
}

fn cmd_attribute(args: AttributeArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let jobs = resolve_jobs(args.jobs)?;
    let prepared = prepare(&config)?;
    let artifacts = load_or_train(&config, &prepared, args.artifacts.as_ref())?;
    let index = build_index(&config, &prepared, &artifacts)?;
    let mut targets: Vec<(Option<usize>, usize)> = Vec::new();
    let event_ids: Vec<usize> = if args.events.is_empty() && args.window.is_empty() {
        (1..=prepared.dataset.events.len()).collect()
    } else {
        args.events.clone()
    };
    for id in event_ids {
        if id == 0 {
            bail!("event ids are 1-based");
        }
        targets.push((Some(id), explanation_window(&config, &prepared, &artifacts, id - 1)?));
    }
    targets.extend(args.window.iter().map(|&s| (None, s)));
    std::fs::create_dir_all(&args.out)?;
    let pool = thread_pool(jobs)?;
    let results = pool.install(|| {
        use rayon::prelude::*;
        targets
            .par_iter()
            .map(|&(_, s)| attribute_window_full(&config, &prepared, &artifacts, &index, s))
            .collect::<anyhow::Result<Vec<_>>>()
    })?;
    let names = prepared.sensor_names();
    let mut rankings = Vec::with_capacity(results.len());
    for ((event, start), r) in targets.iter().zip(&results) {
        let stem = match event {
            Some(id) => format!("event{id}_w{start}"),
            None => format!("w{start}"),
        };
        export_heatmap(&r.tensor, names, args.out.join(format!("{stem}.csv")))?;
        println!(
            "{stem}: score {:.3}{} top {}",
            r.score,
            if r.flagged { " (flagged)" } else { "" },
            r.ranking.iter().take(3).cloned().collect::<Vec<_>>().join(",")
        );
        rankings.push(serde_json::json!({
            "event": event,
            "window_start": start,
            "score": r.score,
            "flagged": r.flagged,
            "attribution": r.attribution,
            "ranking": r.ranking,
            "onset_estimate": start + r.tensor.peak_offset(),
        }));
    }
    write_json(&args.out.join("rankings.json"), &rankings)?;
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let jobs = resolve_jobs(args.jobs)?;
    let values = if args.values.is_empty() {
        args.axis.default_values()
    } else {
        args.values.clone()
    };
    let table = sweep(&config, args.axis, &values, jobs)?;
    print!("{}", table.render());
    if let Some(p) = &args.out {
        write_json(p, &table)?;
    }
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> anyhow::Result<()> {
    let spec = ProbeSpec {
        n_references: args.n_references,
        w: args.w,
        d: args.d,
        embedding_dim: args.embedding_dim,
        queries: args.queries,
        repetitions: args.repetitions,
        k: args.k,
        seed: args.seed,
    };
    let r = cost_probe(&spec)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn cmd_bound(args: BoundArgs) -> anyhow::Result<bool> {
    let spec = BoundSpec {
        trials: args.trials,
        d: args.d,
        w: args.w,
        k: args.k,
        n_references: args.n_references,
        seed: args.seed,
    };
    let trials = bound_trials(&spec)?;
    let held = trials.iter().filter(|r| r.holds).count();
    let worst = trials
        .iter()
        .map(|r| r.bias - r.bound)
        .fold(f64::NEG_INFINITY, f64::max);
    println!("bound held in {held}/{} trials; max(bias - L*W1) = {worst:.3e}", trials.len());
    if let Some(p) = &args.out {
        write_json(p, &trials)?;
    }
    Ok(held == trials.len())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Inject(a) => cmd_inject(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Attribute(a) => cmd_attribute(a).map(|_| true),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
        Command::ProbeCost(a) => cmd_probe(a).map(|_| true),
        Command::CheckBound(a) => cmd_bound(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
