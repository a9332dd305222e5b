//! Synthetic correlated series and fault injection with ground-truth labels.
//!
//! Normal data comes from a latent-factor model: a few AR(1) factors drive
//! all sensors through a loading matrix, so sensors that share a factor are
//! correlated. Faults are injected into chosen sensors over an interval with
//! magnitudes expressed in units of the training standard deviation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{AnomalyEvent, NormalizationStats, SeriesMatrix};
use crate::error::{RcaError, Result};

/// Fraction of interval timesteps hit by a spike fault.
pub const SPIKE_DENSITY: f64 = 0.1;

/// Linear latent-factor generator `x_t = loading * f_t + noise_scale * e_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFactorSystem {
    /// `d x r` loading matrix.
    pub loading: Array2<f64>,
    /// AR(1) coefficient of every factor, in `(0, 1)`.
    pub factor_smoothness: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl LatentFactorSystem {
    pub fn new(
        loading: Array2<f64>,
        factor_smoothness: f64,
        noise_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let sys = Self {
            loading,
            factor_smoothness,
            noise_scale,
            seed,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// Each sensor loads on a single factor (`j mod r`) with a seeded weight
    /// in `[0.5, 1.5]` and random sign.
    pub fn grouped(
        d: usize,
        r: usize,
        factor_smoothness: f64,
        noise_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if r == 0 {
            return Err(RcaError::InvalidParameter("need at least one factor".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_10ad);
        let mut loading = Array2::zeros((d, r));
        for j in 0..d {
            let weight: f64 = rng.random_range(0.5..1.5);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            loading[[j, j % r]] = sign * weight;
        }
        Self::new(loading, factor_smoothness, noise_scale, seed)
    }

    pub fn n_sensors(&self) -> usize {
        self.loading.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.loading.ncols()
    }

    fn validate(&self) -> Result<()> {
        let (d, r) = self.loading.dim();
        if r == 0 || r >= d {
            return Err(RcaError::InvalidParameter(format!(
                "need 0 < r < d, got r={r}, d={d}"
            )));
        }
        if !(self.factor_smoothness > 0.0 && self.factor_smoothness < 1.0) {
            return Err(RcaError::InvalidParameter(
                "factor smoothness must lie in (0, 1)".into(),
            ));
        }
        if !(self.noise_scale >= 0.0) || !self.loading.iter().all(|v| v.is_finite()) {
            return Err(RcaError::InvalidParameter(
                "noise scale must be >= 0 and loadings finite".into(),
            ));
        }
        Ok(())
    }
}

/// Draw `len` timesteps from the system. Factors are stationary AR(1) with
/// unit marginal variance.
pub fn generate(system: &LatentFactorSystem, len: usize) -> Result<SeriesMatrix> {
    system.validate()?;
    if len < 2 {
        return Err(RcaError::InvalidParameter("series length must be >= 2".into()));
    }
    let (d, r) = system.loading.dim();
    let phi = system.factor_smoothness;
    let innovation = (1.0 - phi * phi).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(system.seed);
    let mut factors: Array1<f64> = (0..r).map(|_| rng.sample(StandardNormal)).collect();
    let mut values = Array2::zeros((len, d));
    for t in 0..len {
        if t > 0 {
            for f in factors.iter_mut() {
                let eta: f64 = rng.sample(StandardNormal);
                *f = phi * *f + innovation * eta;
            }
        }
        let clean = system.loading.dot(&factors);
        for j in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            values[[t, j]] = clean[j] + system.noise_scale * eps;
        }
    }
    SeriesMatrix::from_values(values)
}

/// Fault families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Spike,
    Shift,
    Noise,
    Drift,
    Dropout,
    Saturation,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 6] = [
        AnomalyKind::Spike,
        AnomalyKind::Shift,
        AnomalyKind::Noise,
        AnomalyKind::Drift,
        AnomalyKind::Dropout,
        AnomalyKind::Saturation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::Spike => "spike",
            AnomalyKind::Shift => "shift",
            AnomalyKind::Noise => "noise",
            AnomalyKind::Drift => "drift",
            AnomalyKind::Dropout => "dropout",
            AnomalyKind::Saturation => "saturation",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyKind {
    type Err = RcaError;

    fn from_str(s: &str) -> Result<Self> {
        AnomalyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| RcaError::InvalidParameter(format!("unknown anomaly kind '{s}'")))
    }
}

/// One fault to inject, with sensors given as indices.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSpec {
    pub kind: AnomalyKind,
    pub sensors: Vec<usize>,
    pub start: usize,
    pub end: usize,
    /// In training-σ units; ignored for dropout.
    pub magnitude: f64,
    pub seed: u64,
    /// Saturation only: rail below the mean instead of above.
    pub lower: bool,
}

impl InjectionSpec {
    pub fn new(
        kind: AnomalyKind,
        sensor: usize,
        start: usize,
        end: usize,
        magnitude: f64,
        seed: u64,
    ) -> Self {
        Self {
            kind,
            sensors: vec![sensor],
            start,
            end,
            magnitude,
            seed,
            lower: false,
        }
    }

    fn validate(&self, len: usize, d: usize) -> Result<()> {
        if self.start >= self.end || self.end > len {
            return Err(RcaError::OutOfRange(format!(
                "injection interval [{}, {}) invalid for series of length {len}",
                self.start, self.end
            )));
        }
        if self.sensors.is_empty() {
            return Err(RcaError::InvalidParameter("injection needs a sensor".into()));
        }
        if let Some(&j) = self.sensors.iter().find(|&&j| j >= d) {
            return Err(RcaError::OutOfRange(format!("sensor {j} not in 0..{d}")));
        }
        if self.kind != AnomalyKind::Dropout && !(self.magnitude > 0.0) {
            return Err(RcaError::InvalidParameter(format!(
                "{} magnitude must be > 0",
                self.kind
            )));
        }
        Ok(())
    }
}

/// JSON form of an injection, naming sensors instead of indexing them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRequest {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sensors: Vec<String>,
    pub interval: [usize; 2],
    #[serde(default)]
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lower: bool,
}

impl InjectionRequest {
    pub fn resolve(&self, series: &SeriesMatrix) -> Result<InjectionSpec> {
        let kind: AnomalyKind = self.kind.parse()?;
        let mut sensors = Vec::new();
        for name in self.sensor.iter().chain(&self.sensors) {
            let j = series.sensor_index(name)?;
            if !sensors.contains(&j) {
                sensors.push(j);
            }
        }
        Ok(InjectionSpec {
            kind,
            sensors,
            start: self.interval[0],
            end: self.interval[1],
            magnitude: self.magnitude,
            seed: self.seed,
            lower: self.lower,
        })
    }
}

/// Inject one fault. `reference` supplies the training mean and σ used to
/// scale magnitudes. Cells outside `interval x sensors` are left untouched.
///
/// * spike: `±magnitude·σ` at `ceil(0.1·len)` seeded timesteps
/// * shift: `+magnitude·σ` on every timestep
/// * noise: i.i.d. Gaussian with std `magnitude·σ`
/// * drift: ramp reaching `magnitude·σ` at the last timestep
/// * dropout: raw value 0
/// * saturation: output pinned at the rail `mean ± magnitude·σ`
pub fn inject(
    series: &SeriesMatrix,
    spec: &InjectionSpec,
    reference: &NormalizationStats,
) -> Result<(SeriesMatrix, AnomalyEvent)> {
    let (len, d) = (series.len(), series.n_sensors());
    spec.validate(len, d)?;
    if reference.n_sensors() != d {
        return Err(RcaError::DimensionMismatch {
            what: "reference stats",
            expected: d,
            found: reference.n_sensors(),
        });
    }
    let mut values = series.values().to_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.end - spec.start;
    for &j in &spec.sensors {
        let scale = spec.magnitude * reference.std[j];
        let mut col = values.column_mut(j);
        match spec.kind {
            AnomalyKind::Spike => {
                let hits = ((SPIKE_DENSITY * n as f64).ceil() as usize).clamp(1, n);
                let mut idx = sample(&mut rng, n, hits).into_vec();
                idx.sort_unstable();
                for i in idx {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    col[spec.start + i] += sign * scale;
                }
            }
            AnomalyKind::Shift => {
                for t in spec.start..spec.end {
                    col[t] += scale;
                }
            }
            AnomalyKind::Noise => {
                let dist = Normal::new(0.0, scale)
                    .map_err(|e| RcaError::InvalidParameter(e.to_string()))?;
                for t in spec.start..spec.end {
                    col[t] += dist.sample(&mut rng);
                }
            }
            AnomalyKind::Drift => {
                for (i, t) in (spec.start..spec.end).enumerate() {
                    col[t] += scale * (i + 1) as f64 / n as f64;
                }
            }
            AnomalyKind::Dropout => {
                for t in spec.start..spec.end {
                    col[t] = 0.0;
                }
            }
            AnomalyKind::Saturation => {
                let rail = if spec.lower {
                    reference.mean[j] - scale
                } else {
                    reference.mean[j] + scale
                };
                for t in spec.start..spec.end {
                    col[t] = rail;
                }
            }
        }
    }
    let event = AnomalyEvent::new(spec.start, n, spec.sensors.iter().copied().collect::<BTreeSet<_>>())?;
    Ok((series.with_values(values)?, event))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fit_normalization, DEFAULT_STD_FLOOR};

    fn base() -> (SeriesMatrix, NormalizationStats) {
        let sys = LatentFactorSystem::grouped(5, 2, 0.9, 0.2, 3).unwrap();
        let s = generate(&sys, 300).unwrap();
        let st = fit_normalization(&s, 0..300, DEFAULT_STD_FLOOR).unwrap();
        (s, st)
    }

    fn changed_cells(a: &SeriesMatrix, b: &SeriesMatrix) -> Vec<(usize, usize)> {
        a.values()
            .indexed_iter()
            .filter(|&(ix, v)| b.values()[ix].to_bits() != v.to_bits())
            .map(|(ix, _)| ix)
            .collect()
    }

    #[test]
    fn rank_one_noiseless_gives_identical_sensors() {
        let sys = LatentFactorSystem::new(Array2::ones((4, 1)), 0.8, 0.0, 1).unwrap();
        let s = generate(&sys, 50).unwrap();
        for row in s.values().outer_iter() {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn generation_is_seeded() {
        let sys = LatentFactorSystem::grouped(6, 2, 0.9, 0.3, 11).unwrap();
        assert_eq!(generate(&sys, 100).unwrap(), generate(&sys, 100).unwrap());
        let other = LatentFactorSystem { seed: 12, ..sys.clone() };
        assert_ne!(generate(&sys, 100).unwrap(), generate(&other, 100).unwrap());
    }

    #[test]
    fn rejects_bad_systems() {
        assert!(LatentFactorSystem::new(Array2::ones((3, 3)), 0.5, 0.1, 0).is_err());
        assert!(LatentFactorSystem::new(Array2::ones((3, 1)), 1.0, 0.1, 0).is_err());
        let sys = LatentFactorSystem::grouped(3, 1, 0.5, 0.1, 0).unwrap();
        assert!(generate(&sys, 1).is_err());
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn shared_factors_induce_correlation() {
        let sys = LatentFactorSystem::grouped(10, 2, 0.9, 0.5, 5).unwrap();
        let s = generate(&sys, 2000).unwrap();
        let cols: Vec<Vec<f64>> = (0..10).map(|j| s.values().column(j).to_vec()).collect();
        let (mut same, mut cross) = (Vec::new(), Vec::new());
        for a in 0..10 {
            for b in a + 1..10 {
                let c = corr(&cols[a], &cols[b]).abs();
                if a % 2 == b % 2 {
                    same.push(c)
                } else {
                    cross.push(c)
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&same) > mean(&cross) + 0.3, "{} vs {}", mean(&same), mean(&cross));
        assert!(same.iter().all(|&c| c > 0.0));
    }

    #[test]
    fn dropout_is_local() {
        let (s, st) = base();
        let spec = InjectionSpec::new(AnomalyKind::Dropout, 2, 10, 20, 0.0, 0);
        let (out, ev) = inject(&s, &spec, &st).unwrap();
        for t in 10..20 {
            assert_eq!(out.values()[[t, 2]], 0.0);
        }
        assert!(changed_cells(&s, &out).iter().all(|&(t, j)| j == 2 && (10..20).contains(&t)));
        assert_eq!((ev.onset, ev.duration), (10, 10));
        assert_eq!(ev.ground_truth, [2].into());
    }

    #[test]
    fn shift_adds_constant() {
        let (s, st) = base();
        let spec = InjectionSpec::new(AnomalyKind::Shift, 1, 40, 60, 3.0, 0);
        let (out, _) = inject(&s, &spec, &st).unwrap();
        for t in 40..60 {
            let diff = out.values()[[t, 1]] - s.values()[[t, 1]];
            assert!((diff - 3.0 * st.std[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn spike_count_and_reproducibility() {
        let (s, st) = base();
        let spec = InjectionSpec::new(AnomalyKind::Spike, 0, 100, 137, 4.0, 9);
        let (a, _) = inject(&s, &spec, &st).unwrap();
        let (b, _) = inject(&s, &spec, &st).unwrap();
        assert_eq!(a, b);
        let diffs = changed_cells(&s, &a);
        assert_eq!(diffs.len(), (0.1f64 * 37.0).ceil() as usize);
        assert!(diffs.iter().all(|&(t, j)| j == 0 && (100..137).contains(&t)));
    }

    #[test]
    fn every_kind_is_local_and_deterministic() {
        let (s, st) = base();
        for kind in AnomalyKind::ALL {
            let mut spec = InjectionSpec::new(kind, 3, 50, 80, 2.5, 4);
            spec.sensors.push(1);
            let (a, ev) = inject(&s, &spec, &st).unwrap();
            let (b, _) = inject(&s, &spec, &st).unwrap();
            assert_eq!(a, b, "{kind}");
            assert_eq!(ev.ground_truth, [1, 3].into());
            for (t, j) in changed_cells(&s, &a) {
                assert!((50..80).contains(&t) && (j == 1 || j == 3), "{kind} ({t},{j})");
            }
        }
    }

    #[test]
    fn drift_is_monotone() {
        let (s, st) = base();
        let spec = InjectionSpec::new(AnomalyKind::Drift, 4, 20, 45, 3.0, 0);
        let (out, _) = inject(&s, &spec, &st).unwrap();
        let added: Vec<f64> = (20..45).map(|t| out.values()[[t, 4]] - s.values()[[t, 4]]).collect();
        assert!(added.windows(2).all(|p| p[1] >= p[0]));
        assert!((added[24] - 3.0 * st.std[4]).abs() < 1e-12);
    }

    #[test]
    fn saturation_pins_rail() {
        let (s, st) = base();
        let mut spec = InjectionSpec::new(AnomalyKind::Saturation, 0, 5, 15, 2.0, 0);
        let (hi, _) = inject(&s, &spec, &st).unwrap();
        assert!((5..15).all(|t| hi.values()[[t, 0]] == st.mean[0] + 2.0 * st.std[0]));
        spec.lower = true;
        let (lo, _) = inject(&s, &spec, &st).unwrap();
        assert!((5..15).all(|t| lo.values()[[t, 0]] == st.mean[0] - 2.0 * st.std[0]));
    }

    #[test]
    fn rejects_invalid_specs() {
        let (s, st) = base();
        let bad_interval = InjectionSpec::new(AnomalyKind::Shift, 0, 290, 310, 1.0, 0);
        assert!(matches!(inject(&s, &bad_interval, &st), Err(RcaError::OutOfRange(_))));
        let bad_mag = InjectionSpec::new(AnomalyKind::Noise, 0, 10, 20, 0.0, 0);
        assert!(inject(&s, &bad_mag, &st).is_err());
        assert!("wobble".parse::<AnomalyKind>().is_err());
    }

    #[test]
    fn request_json_resolves_names() {
        let (s, _) = base();
        let json = r#"{"kind":"shift","sensor":"s3","interval":[100,200],"magnitude":3.0,"seed":7}"#;
        let req: InjectionRequest = serde_json::from_str(json).unwrap();
        let spec = req.resolve(&s).unwrap();
        assert_eq!(spec.kind, AnomalyKind::Shift);
        assert_eq!(spec.sensors, vec![3]);
        assert_eq!((spec.start, spec.end, spec.seed), (100, 200, 7));
        let unknown: InjectionRequest =
            serde_json::from_str(r#"{"kind":"blip","sensor":"s1","interval":[0,1]}"#).unwrap();
        assert!(unknown.resolve(&s).is_err());
    }
}
