//! Run configuration: one JSON document, with CLI overrides applied on top.

use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rca_core::attribution::Conditioning;
use rca_core::metrics::{MetricSettings, DEFAULT_BETA, DEFAULT_EPS, DEFAULT_KS};
use serde::{Deserialize, Serialize};

use crate::scenario::SynthScenario;

pub const DEFAULT_WINDOW: usize = 50;
pub const DEFAULT_DONORS: usize = 3;
pub const DEFAULT_QUANTILE: f64 = 0.995;
/// Environment variable holding the default worker count.
pub const JOBS_ENV: &str = "RCA_JOBS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Csv {
        series: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        has_timestamp: bool,
    },
    Synth(SynthScenario),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthScenario::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DetectorSpec {
    Pca {
        components: usize,
    },
    Ae {
        hidden: Vec<usize>,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
    },
    External {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec::Pca { components: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalSpace {
    Input,
    Pca,
    Vae,
    Imported,
}

impl RetrievalSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalSpace::Input => "input",
            RetrievalSpace::Pca => "pca",
            RetrievalSpace::Vae => "vae",
            RetrievalSpace::Imported => "imported",
        }
    }
}

impl std::str::FromStr for RetrievalSpace {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Ok(match s {
            "input" => RetrievalSpace::Input,
            "pca" => RetrievalSpace::Pca,
            "vae" => RetrievalSpace::Vae,
            "imported" => RetrievalSpace::Imported,
            _ => bail!("unknown retrieval space '{s}' (input, pca, vae, imported)"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSpec {
    pub pca_dim: usize,
    pub vae_hidden: Vec<usize>,
    pub vae_latent: usize,
    pub vae_epochs: usize,
    pub vae_learning_rate: f64,
    pub vae_batch_size: usize,
    /// CSV written by `export_embeddings`; required for the imported space.
    pub imported: Option<PathBuf>,
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        Self {
            pca_dim: 8,
            vae_hidden: vec![64, 32],
            vae_latent: 8,
            vae_epochs: 30,
            vae_learning_rate: 1e-3,
            vae_batch_size: 64,
            imported: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    Conditional,
    Unconditional,
    Shared,
}

impl std::str::FromStr for ConditioningMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        Ok(match s {
            "conditional" => ConditioningMode::Conditional,
            "unconditional" | "marginal" => ConditioningMode::Unconditional,
            "shared" => ConditioningMode::Shared,
            _ => bail!("unknown conditioning '{s}' (conditional, unconditional, shared)"),
        })
    }
}

/// Where the per-timestep rankings used by `E` and `A` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestepRanking {
    /// Whole-window attribution of the window ending at the timestep.
    Window,
    /// Last row of that window's attribution tensor.
    Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    /// Normal range for normalization, detector, embedding and index.
    /// Synthetic data defaults to the scenario's training prefix.
    pub train_range: Option<[usize; 2]>,
    /// Normal range whose window scores set the threshold; defaults to the
    /// training range.
    pub threshold_range: Option<[usize; 2]>,
    pub w: usize,
    /// Stride of the reference windows.
    pub stride: usize,
    pub detector: DetectorSpec,
    pub retrieval: RetrievalSpace,
    pub embedding: EmbeddingSpec,
    pub conditioning: ConditioningMode,
    /// Donors per attribution.
    pub k: usize,
    /// Segment length of the temporal tensor.
    pub segment: usize,
    pub metric_ks: Vec<usize>,
    pub beta: f64,
    pub eps: f64,
    pub threshold_quantile: f64,
    /// Rank sensors by signed attribution instead of magnitude.
    pub signed_ranking: bool,
    pub timestep_ranking: TimestepRanking,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            train_range: None,
            threshold_range: None,
            w: DEFAULT_WINDOW,
            stride: 1,
            detector: DetectorSpec::default(),
            retrieval: RetrievalSpace::Pca,
            embedding: EmbeddingSpec::default(),
            conditioning: ConditioningMode::Conditional,
            k: DEFAULT_DONORS,
            segment: 1,
            metric_ks: DEFAULT_KS.to_vec(),
            beta: DEFAULT_BETA,
            eps: DEFAULT_EPS,
            threshold_quantile: DEFAULT_QUANTILE,
            signed_ranking: false,
            timestep_ranking: TimestepRanking::Window,
            seed: 0,
        }
    }
}

fn as_range(r: [usize; 2]) -> Range<usize> {
    r[0]..r[1]
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.w == 0 || self.stride == 0 || self.k == 0 {
            bail!("w, stride and k must be >= 1");
        }
        if self.segment == 0 || self.segment > self.w {
            bail!("segment length {} not in 1..={}", self.segment, self.w);
        }
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile < 1.0) {
            bail!("threshold quantile must lie in (0, 1)");
        }
        self.metric_settings().validate()?;
        if self.retrieval == RetrievalSpace::Imported && self.embedding.imported.is_none() {
            bail!("imported retrieval needs embedding.imported");
        }
        if let DataSource::Csv { .. } = self.data {
            if self.train_range.is_none() {
                bail!("CSV data needs an explicit train_range");
            }
        }
        Ok(())
    }

    pub fn metric_settings(&self) -> MetricSettings {
        MetricSettings {
            ks: self.metric_ks.clone(),
            beta: self.beta,
            eps: self.eps,
        }
    }

    pub fn conditioning(&self) -> Conditioning {
        match self.conditioning {
            ConditioningMode::Conditional => Conditioning::Conditional,
            ConditioningMode::Shared => Conditioning::Shared,
            ConditioningMode::Unconditional => Conditioning::Marginal {
                seed: self.seed ^ 0x0d0_0a7e,
            },
        }
    }

    /// Explicit training range, or the synthetic scenario's prefix.
    pub fn train_range(&self) -> anyhow::Result<Range<usize>> {
        match (&self.train_range, &self.data) {
            (Some(r), _) => Ok(as_range(*r)),
            (None, DataSource::Synth(s)) => Ok(0..s.train_length),
            (None, DataSource::Csv { .. }) => bail!("CSV data needs an explicit train_range"),
        }
    }

    pub fn threshold_range(&self) -> anyhow::Result<Range<usize>> {
        match self.threshold_range {
            Some(r) => Ok(as_range(r)),
            None => self.train_range(),
        }
    }
}

/// Worker count: explicit value, else [`JOBS_ENV`], else all cores.
pub fn resolve_jobs(explicit: Option<usize>) -> anyhow::Result<usize> {
    if let Some(j) = explicit {
        if j == 0 {
            bail!("--jobs must be >= 1");
        }
        return Ok(j);
    }
    if let Ok(v) = std::env::var(JOBS_ENV) {
        let j: usize = v
            .parse()
            .with_context(|| format!("{JOBS_ENV}='{v}' is not a positive integer"))?;
        if j == 0 {
            bail!("{JOBS_ENV} must be >= 1");
        }
        return Ok(j);
    }
    Ok(std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.w, 50);
        assert_eq!(c.k, 3);
        assert_eq!(c.segment, 1);
        assert_eq!(c.metric_ks, vec![3, 5, 10]);
        assert_eq!(c.beta, 1.0);
        assert_eq!(c.threshold_quantile, 0.995);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"w": 20, "retrieval": "input"}"#).unwrap();
        assert_eq!(c.w, 20);
        assert_eq!(c.retrieval, RetrievalSpace::Input);
        assert_eq!(c.k, 3);
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"window": 20}"#).is_err());
    }

    #[test]
    fn csv_source_needs_train_range() {
        let c: RunConfig =
            serde_json::from_str(r#"{"data": {"source": "csv", "series": "x.csv"}}"#).unwrap();
        assert!(c.validate().is_err());
        assert!(c.train_range().is_err());
    }

    #[test]
    fn bad_values_fail_validation() {
        let mut c = RunConfig { segment: 60, ..RunConfig::default() };
        assert!(c.validate().is_err());
        c.segment = 1;
        c.metric_ks = vec![0];
        assert!(c.validate().is_err());
        c.metric_ks = vec![3];
        c.threshold_quantile = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn explicit_jobs_win() {
        assert_eq!(resolve_jobs(Some(3)).unwrap(), 3);
        assert!(resolve_jobs(Some(0)).is_err());
    }
}
