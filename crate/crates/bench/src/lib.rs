//! Config-driven benchmark runs for conditional root cause attribution:
//! fault injection, training, per-event evaluation, ablation sweeps and
//! heatmap export.

pub mod config;
pub mod experiments;
pub mod pipeline;
pub mod report;
pub mod scenario;

pub use config::RunConfig;
pub use pipeline::{evaluate, prepare, train, Artifacts, Prepared};
pub use report::RunReport;
