//! Counterfactual attribution: replace a sensor's trajectory (or a segment
//! of it) with donor trajectories from normal windows and measure the score
//! drop.
//!
//! Positive values mean the replacement lowers the anomaly score.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, Window};
use crate::detector::Scorer;
use crate::error::{RcaError, Result};
use crate::retrieval::{knn_conditional, knn_shared, knn_unconditional, NeighborIndex};

/// How donors are chosen for a `(window, sensor)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Conditioning {
    /// Sensor-specific neighbors of the masked context.
    Conditional,
    /// One neighborhood of the unmasked window shared by all sensors.
    Shared,
    /// Uniformly drawn references.
    Marginal { seed: u64 },
}

impl Conditioning {
    pub fn name(&self) -> &'static str {
        match self {
            Conditioning::Conditional => "conditional",
            Conditioning::Shared => "shared",
            Conditioning::Marginal { .. } => "marginal",
        }
    }
}

/// Seed of the marginal draw for one `(window, sensor)` pair.
pub fn marginal_seed(seed: u64, window_start: usize, sensor: usize) -> u64 {
    let mut x = seed ^ (window_start as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (sensor as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    // splitmix64 finalizer
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Reference indices used as donors for sensor `j`.
pub fn donors(
    index: &NeighborIndex,
    window: &Window,
    j: usize,
    k: usize,
    conditioning: Conditioning,
) -> Result<Vec<usize>> {
    Ok(match conditioning {
        Conditioning::Conditional => knn_conditional(index, window, j, k)?.indices,
        Conditioning::Shared => {
            if j >= window.n_sensors() {
                return Err(RcaError::OutOfRange(format!("sensor {j} not in 0..{}", window.n_sensors())));
            }
            knn_shared(index, window, k)?.indices
        }
        Conditioning::Marginal { seed } => {
            knn_unconditional(index, window, j, k, marginal_seed(seed, window.start, j))?.indices
        }
    })
}

/// Copy of `window` with rows `rows` of column `j` taken from `donor`.
pub fn splice(window: &Window, donor: &Window, j: usize, rows: Range<usize>) -> Array2<f64> {
    let mut out = window.data.clone();
    for t in rows {
        out[[t, j]] = donor.data[[t, j]];
    }
    out
}

/// Segment of length `s` around `tau`, shifted to stay inside `0..w`.
pub fn segment(tau: usize, s: usize, w: usize) -> Range<usize> {
    let start = tau.saturating_sub((s - 1) / 2).min(w - s);
    start..start + s
}

/// Mean score drop over `donors` when rows `rows` of column `j` are
/// replaced. `base` is the score of the unmodified window.
fn mean_drop(
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
    base: f64,
    j: usize,
    rows: Range<usize>,
    donor_ids: &[usize],
) -> Result<f64> {
    let composites: Vec<Array2<f64>> = donor_ids
        .iter()
        .map(|&i| splice(window, index.reference(i), j, rows.clone()))
        .collect();
    let scores = detector.score_batch(&composites)?;
    Ok(scores.iter().map(|s| base - s).sum::<f64>() / donor_ids.len() as f64)
}

fn check_window(index: &NeighborIndex, window: &Window, j: usize) -> Result<()> {
    let (w, d) = index.window_shape();
    if window.data.dim() != (w, d) {
        return Err(RcaError::DimensionMismatch {
            what: "attributed window",
            expected: w * d,
            found: window.data.len(),
        });
    }
    if j >= d {
        return Err(RcaError::OutOfRange(format!("sensor {j} not in 0..{d}")));
    }
    Ok(())
}

/// Score drop averaged over explicitly given donors.
pub fn attribution_with_donors(
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
    j: usize,
    donor_ids: &[usize],
) -> Result<f64> {
    check_window(index, window, j)?;
    if donor_ids.is_empty() {
        return Err(RcaError::InvalidParameter("no donors".into()));
    }
    let base = detector.score(window.data.view())?;
    mean_drop(detector, index, window, base, j, 0..window.len(), donor_ids)
}

pub fn conditional_attribution(
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
    j: usize,
    k: usize,
) -> Result<f64> {
    check_window(index, window, j)?;
    let ids = donors(index, window, j, k, Conditioning::Conditional)?;
    attribution_with_donors(detector, index, window, j, &ids)
}

pub fn marginal_attribution(
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
    j: usize,
    k: usize,
    seed: u64,
) -> Result<f64> {
    check_window(index, window, j)?;
    let ids = donors(index, window, j, k, Conditioning::Marginal { seed })?;
    attribution_with_donors(detector, index, window, j, &ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorAttribution {
    pub window_start: usize,
    pub values: Vec<f64>,
    pub method: String,
}

/// Whole-trajectory attribution of every sensor of `window`.
pub fn sensor_attribution(
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
    k: usize,
    conditioning: Conditioning,
) -> Result<SensorAttribution> {
    check_window(index, window, 0)?;
    let ids = (0..window.n_sensors())
        .map(|j| donors(index, window, j, k, conditioning))
        .collect::<Result<Vec<_>>>()?;
    sensor_attribution_with_donors(detector, index, window, &ids, conditioning.name())
}

/// Sensor attribution from one donor list per sensor, e.g. gathered ahead
/// of time so retrieval and scoring can be timed apart.
pub fn sensor_attribution_with_donors(
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
    donor_ids: &[Vec<usize>],
    method: &str,
) -> Result<SensorAttribution> {
    check_window(index, window, 0)?;
    if donor_ids.len() != window.n_sensors() {
        return Err(RcaError::DimensionMismatch {
            what: "donor lists",
            expected: window.n_sensors(),
            found: donor_ids.len(),
        });
    }
    if donor_ids.iter().any(|ids| ids.is_empty()) {
        return Err(RcaError::InvalidParameter("no donors".into()));
    }
    let base = detector.score(window.data.view())?;
    let values = donor_ids
        .iter()
        .enumerate()
        .map(|(j, ids)| mean_drop(detector, index, window, base, j, 0..window.len(), ids))
        .collect::<Result<Vec<f64>>>()?;
    Ok(SensorAttribution {
        window_start: window.start,
        values,
        method: method.into(),
    })
}

/// `Phi(tau, j)` for every `tau`, replacing `s`-length segments of column
/// `j` with the same donors used for the sensor-level value.
pub fn temporal_attribution(
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
    j: usize,
    s: usize,
    k: usize,
    conditioning: Conditioning,
) -> Result<Vec<f64>> {
    check_window(index, window, j)?;
    check_segment(s, window.len())?;
    let base = detector.score(window.data.view())?;
    let ids = donors(index, window, j, k, conditioning)?;
    temporal_column(detector, index, window, base, j, s, &ids)
}

fn check_segment(s: usize, w: usize) -> Result<()> {
    if s == 0 || s > w {
        return Err(RcaError::InvalidParameter(format!("segment length {s} not in 1..={w}")));
    }
    Ok(())
}

fn temporal_column(
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
    base: f64,
    j: usize,
    s: usize,
    donor_ids: &[usize],
) -> Result<Vec<f64>> {
    let w = window.len();
    let mut composites = Vec::with_capacity(w * donor_ids.len());
    for tau in 0..w {
        let rows = segment(tau, s, w);
        for &i in donor_ids {
            composites.push(splice(window, index.reference(i), j, rows.clone()));
        }
    }
    let scores = detector.score_batch(&composites)?;
    Ok(scores
        .chunks(donor_ids.len())
        .map(|c| c.iter().map(|s| base - s).sum::<f64>() / donor_ids.len() as f64)
        .collect())
}

/// Sensor-time attribution map of one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionTensor {
    pub window_start: usize,
    /// `w x d`, indexed `[tau, j]`.
    pub values: Array2<f64>,
    pub segment_length: usize,
    pub k: usize,
    pub method: String,
}

impl AttributionTensor {
    /// `sum_tau Phi(tau, j)` per sensor.
    pub fn sensor_totals(&self) -> Vec<f64> {
        self.values.columns().into_iter().map(|c| c.sum()).collect()
    }

    /// `sum_j Phi(tau, j)` per timestep.
    pub fn time_totals(&self) -> Vec<f64> {
        self.values.rows().into_iter().map(|r| r.sum()).collect()
    }

    /// Offset within the window with the largest summed attribution; ties
    /// go to the earliest offset.
    pub fn peak_offset(&self) -> usize {
        let totals = self.time_totals();
        let mut best = 0;
        for (t, &v) in totals.iter().enumerate() {
            if v > totals[best] {
                best = t;
            }
        }
        best
    }
}

pub fn attribution_tensor(
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
    s: usize,
    k: usize,
    conditioning: Conditioning,
) -> Result<AttributionTensor> {
    check_window(index, window, 0)?;
    check_segment(s, window.len())?;
    let base = detector.score(window.data.view())?;
    let (w, d) = window.data.dim();
    let mut values = Array2::zeros((w, d));
    for j in 0..d {
        let ids = donors(index, window, j, k, conditioning)?;
        let col = temporal_column(detector, index, window, base, j, s, &ids)?;
        values.column_mut(j).assign(&Array1::from(col));
    }
    Ok(AttributionTensor {
        window_start: window.start,
        values,
        segment_length: s,
        k,
        method: conditioning.name().into(),
    })
}

#[derive(Serialize)]
struct HeatmapSidecar<'a> {
    window_start: usize,
    method: &'a str,
    k: usize,
    segment_length: usize,
    sensors: &'a [String],
}

/// Heatmap CSV: one row per offset `tau`, one column per sensor.
pub fn write_heatmap<W: Write>(tensor: &AttributionTensor, sensor_names: &[String], writer: W) -> Result<()> {
    if sensor_names.len() != tensor.values.ncols() {
        return Err(RcaError::DimensionMismatch {
            what: "heatmap sensor names",
            expected: tensor.values.ncols(),
            found: sensor_names.len(),
        });
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let map_err = |e: csv::Error| RcaError::Csv {
        line: 0,
        message: e.to_string(),
    };
    let mut header = vec!["tau".to_string()];
    header.extend(sensor_names.iter().cloned());
    wtr.write_record(&header).map_err(map_err)?;
    for (tau, row) in tensor.values.outer_iter().enumerate() {
        let mut rec = vec![tau.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        wtr.write_record(&rec).map_err(map_err)?;
    }
    wtr.flush().map_err(|e| RcaError::Csv {
        line: 0,
        message: e.to_string(),
    })
}

/// Writes `path` and a JSON sidecar next to it (`path` with `.json`).
pub fn export_heatmap(tensor: &AttributionTensor, sensor_names: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_heatmap(tensor, sensor_names, &mut buf)?;
    write_atomic(path, &buf)?;
    let sidecar = HeatmapSidecar {
        window_start: tensor.window_start,
        method: &tensor.method,
        k: tensor.k,
        segment_length: tensor.segment_length,
        sensors: sensor_names,
    };
    write_atomic(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())
}

/// Largest sample count accepted by [`wasserstein1_empirical`].
pub const W1_MAX_SAMPLES: usize = 256;

/// Minimum-cost perfect matching on a square cost matrix (row `i` gets
/// column `result[i]`). Shortest augmenting paths with potentials, O(n^3).
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "square cost matrix");
    // 1-based arrays; index 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        result[row_of[j] - 1] = j - 1;
    }
    result
}

fn lex_cmp(a: &[Vec<f64>], b: &[Vec<f64>]) -> std::cmp::Ordering {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Exact Wasserstein-1 distance between two uniform empirical measures of
/// equal size under the Euclidean ground metric.
pub fn wasserstein1_empirical(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    let n = p.len();
    if n == 0 {
        return Err(RcaError::Empty("no samples for wasserstein distance".into()));
    }
    if q.len() != n {
        return Err(RcaError::DimensionMismatch {
            what: "wasserstein sample count",
            expected: n,
            found: q.len(),
        });
    }
    if n > W1_MAX_SAMPLES {
        return Err(RcaError::InvalidParameter(format!(
            "{n} samples exceed the limit of {W1_MAX_SAMPLES}"
        )));
    }
    let dim = p[0].len();
    if let Some(bad) = p.iter().chain(q).find(|x| x.len() != dim) {
        return Err(RcaError::DimensionMismatch {
            what: "wasserstein sample dimension",
            expected: dim,
            found: bad.len(),
        });
    }
    // a fixed argument order makes the result symmetric to the last bit
    let (a, b) = if lex_cmp(p, q).is_gt() { (q, p) } else { (p, q) };
    let cost = Array2::from_shape_fn((n, n), |(i, j)| {
        euclid(ArrayView1::from(&a[i][..]), ArrayView1::from(&b[j][..]))
    });
    let matching = min_cost_assignment(&cost);
    let mut matched: Vec<f64> = matching.iter().enumerate().map(|(i, &j)| cost[[i, j]]).collect();
    matched.sort_by(f64::total_cmp);
    Ok(matched.iter().sum::<f64>() / n as f64)
}

fn euclid(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Absolute slack allowed when checking the bound.
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasBoundReport {
    pub sensor: usize,
    pub conditional: f64,
    pub marginal: f64,
    pub bias: f64,
    pub lipschitz: f64,
    pub w1: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Compare conditional and marginal attribution of sensor `j` (same `k`
/// donors each) against `L * W1` of the two donor-trajectory samples.
pub fn check_bias_bound(
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
    j: usize,
    k: usize,
    seed: u64,
) -> Result<BiasBoundReport> {
    check_window(index, window, j)?;
    let lipschitz = detector.lipschitz(j).ok_or(RcaError::UnknownLipschitz(j))?;
    let cond_ids = donors(index, window, j, k, Conditioning::Conditional)?;
    let marg_ids = donors(index, window, j, k, Conditioning::Marginal { seed })?;
    bias_bound_with_donors(detector, index, window, j, lipschitz, &cond_ids, &marg_ids)
}

pub fn bias_bound_with_donors(
    detector: &dyn Scorer,
    index: &NeighborIndex,
    window: &Window,
    j: usize,
    lipschitz: f64,
    cond_ids: &[usize],
    marg_ids: &[usize],
) -> Result<BiasBoundReport> {
    let conditional = attribution_with_donors(detector, index, window, j, cond_ids)?;
    let marginal = attribution_with_donors(detector, index, window, j, marg_ids)?;
    let column = |i: &usize| index.reference(*i).data.column(j).to_vec();
    let p: Vec<Vec<f64>> = cond_ids.iter().map(column).collect();
    let q: Vec<Vec<f64>> = marg_ids.iter().map(column).collect();
    let w1 = wasserstein1_empirical(&p, &q)?;
    let bias = (conditional - marginal).abs();
    let bound = lipschitz * w1;
    Ok(BiasBoundReport {
        sensor: j,
        conditional,
        marginal,
        bias,
        lipschitz,
        w1,
        bound,
        holds: bias <= bound + BOUND_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sliding_windows;
    use crate::detector::{train_pca_detector, LinearDetector};
    use crate::embedding::fit_pca_embedding;
    use crate::retrieval::SearchSpace;
    use crate::synth::{generate, LatentFactorSystem};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn windows(len: usize, d: usize, w: usize, seed: u64) -> Vec<Window> {
        let sys = LatentFactorSystem::grouped(d, if d > 2 { 2 } else { 1 }, 0.9, 0.3, seed).unwrap();
        sliding_windows(&generate(&sys, len).unwrap(), w, 1).unwrap()
    }

    fn setup(d: usize, w: usize, seed: u64) -> (NeighborIndex, Vec<Window>) {
        let refs = windows(200, d, w, seed);
        let queries = windows(100, d, w, seed + 1000);
        (NeighborIndex::from_windows(refs, SearchSpace::Input).unwrap(), queries)
    }

    /// Ignores one sensor entirely.
    struct Blind {
        inner: LinearDetector,
        ignored: usize,
    }

    impl Scorer for Blind {
        fn window_shape(&self) -> (usize, usize) {
            self.inner.window_shape()
        }
        fn score(&self, window: ndarray::ArrayView2<'_, f64>) -> Result<f64> {
            let mut x = window.to_owned();
            x.column_mut(self.ignored).fill(0.0);
            let nonlinear: f64 = x.iter().map(|v| v * v).sum();
            Ok(self.inner.score(x.view())? + nonlinear.sqrt())
        }
    }

    #[test]
    fn constant_detector_attributes_nothing() {
        let (idx, qs) = setup(3, 6, 1);
        let det = LinearDetector::constant(6, 3, 4.2);
        for j in 0..3 {
            assert_eq!(conditional_attribution(&det, &idx, &qs[5], j, 3).unwrap(), 0.0);
            assert_eq!(marginal_attribution(&det, &idx, &qs[5], j, 3, 9).unwrap(), 0.0);
            let col = temporal_attribution(&det, &idx, &qs[5], j, 2, 3, Conditioning::Conditional).unwrap();
            assert!(col.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sum_detector_single_neighbor_by_hand() {
        let (idx, qs) = setup(3, 5, 2);
        let det = LinearDetector::sum(5, 3);
        let q = &qs[10];
        for j in 0..3 {
            let nb = knn_conditional(&idx, q, j, 1).unwrap().indices[0];
            let want: f64 = (0..5).map(|t| q.data[[t, j]] - idx.reference(nb).data[[t, j]]).sum();
            let got = conditional_attribution(&det, &idx, q, j, 1).unwrap();
            assert!((got - want).abs() < 1e-12);
            let col = temporal_attribution(&det, &idx, q, j, 1, 1, Conditioning::Conditional).unwrap();
            for (t, v) in col.iter().enumerate() {
                assert!((v - (q.data[[t, j]] - idx.reference(nb).data[[t, j]])).abs() < 1e-12);
            }
            assert!((col.iter().sum::<f64>() - got).abs() < 1e-9);
        }
    }

    #[test]
    fn self_replacement_contributes_zero() {
        let refs = windows(80, 3, 4, 3);
        let idx = NeighborIndex::from_windows(refs.clone(), SearchSpace::Input).unwrap();
        let det = train_pca_detector(&refs, 2).unwrap();
        assert_eq!(attribution_with_donors(&det, &idx, &refs[12], 1, &[12]).unwrap(), 0.0);
    }

    #[test]
    fn identical_donor_columns_make_marginal_equal_conditional() {
        let mut refs = windows(60, 3, 4, 4);
        for r in &mut refs {
            r.data.column_mut(2).assign(&array![0.1, -0.2, 0.3, 0.0]);
        }
        let idx = NeighborIndex::from_windows(refs, SearchSpace::Input).unwrap();
        let q = &windows(60, 3, 4, 5)[3];
        let det = Blind {
            inner: LinearDetector::sum(4, 3),
            ignored: 0,
        };
        let c = conditional_attribution(&det, &idx, q, 2, 3).unwrap();
        let m = marginal_attribution(&det, &idx, q, 2, 3, 1).unwrap();
        assert_eq!(c, m);
    }

    #[test]
    fn marginal_is_mean_of_single_donor_values() {
        let (idx, qs) = setup(3, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let det = LinearDetector {
            weights: Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0)),
            bias: 0.3,
        };
        let q = &qs[20];
        let ids = donors(&idx, q, 1, 4, Conditioning::Marginal { seed: 77 }).unwrap();
        assert_eq!(ids.len(), 4);
        let singles: f64 = ids
            .iter()
            .map(|&i| {
                let composite = splice(q, idx.reference(i), 1, 0..4);
                det.score(q.data.view()).unwrap() - det.score(composite.view()).unwrap()
            })
            .sum::<f64>()
            / 4.0;
        let m = marginal_attribution(&det, &idx, q, 1, 4, 77).unwrap();
        assert!((m - singles).abs() < 1e-12);
    }

    #[test]
    fn full_segment_matches_sensor_value() {
        let refs = windows(150, 3, 6, 7);
        let idx = NeighborIndex::from_windows(refs.clone(), SearchSpace::Input).unwrap();
        let det = train_pca_detector(&refs, 3).unwrap();
        let q = &windows(80, 3, 6, 8)[30];
        for j in 0..3 {
            let phi = conditional_attribution(&det, &idx, q, j, 3).unwrap();
            let col = temporal_attribution(&det, &idx, q, j, 6, 3, Conditioning::Conditional).unwrap();
            assert!(col.iter().all(|&v| v == phi));
        }
    }

    #[test]
    fn segments_stay_inside() {
        assert_eq!(segment(0, 3, 10), 0..3);
        assert_eq!(segment(5, 3, 10), 4..7);
        assert_eq!(segment(9, 3, 10), 7..10);
        assert_eq!(segment(4, 1, 10), 4..5);
        assert_eq!(segment(7, 10, 10), 0..10);
        assert_eq!(segment(5, 4, 10), 4..8);
    }

    #[test]
    fn tensor_properties() {
        let (idx, qs) = setup(4, 5, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let det = LinearDetector {
            weights: Array2::from_shape_simple_fn((5, 4), || rng.random_range(-2.0..2.0)),
            bias: 0.0,
        };
        let q = &qs[40];
        let t = attribution_tensor(&det, &idx, q, 1, 3, Conditioning::Conditional).unwrap();
        assert_eq!(t.values.dim(), (5, 4));
        for (j, total) in t.sensor_totals().into_iter().enumerate() {
            let phi = conditional_attribution(&det, &idx, q, j, 3).unwrap();
            assert!((total - phi).abs() < 1e-9);
        }
        assert_eq!(t, attribution_tensor(&det, &idx, q, 1, 3, Conditioning::Conditional).unwrap());

        let refs1: Vec<Window> = windows(100, 2, 5, 10)
            .into_iter()
            .map(|w| Window {
                start: w.start,
                data: w.data.slice(ndarray::s![.., ..1]).to_owned(),
            })
            .collect();
        let idx1 = NeighborIndex::from_windows(refs1.clone(), SearchSpace::Input).unwrap();
        let det1 = train_pca_detector(&refs1, 2).unwrap();
        let t1 = attribution_tensor(&det1, &idx1, &refs1[3], 2, 2, Conditioning::Conditional).unwrap();
        let col = temporal_attribution(&det1, &idx1, &refs1[3], 0, 2, 2, Conditioning::Conditional).unwrap();
        assert_eq!(t1.values.column(0).to_vec(), col);
    }

    #[test]
    fn embedded_index_attributes_too() {
        let refs = windows(200, 3, 5, 11);
        let emb = fit_pca_embedding(&refs, 4).unwrap();
        let idx = NeighborIndex::from_windows(refs.clone(), SearchSpace::Embedded(emb)).unwrap();
        let det = LinearDetector::sum(5, 3);
        let sa = sensor_attribution(&det, &idx, &refs[7], 3, Conditioning::Conditional).unwrap();
        assert_eq!(sa.values.len(), 3);
        assert!(sa.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_errors() {
        let (idx, _) = setup(3, 5, 12);
        let det = LinearDetector::sum(5, 3);
        let bad = Window {
            start: 0,
            data: Array2::zeros((4, 3)),
        };
        assert!(conditional_attribution(&det, &idx, &bad, 0, 1).is_err());
        let ok = idx.reference(0).clone();
        assert!(conditional_attribution(&det, &idx, &ok, 3, 1).is_err());
        assert!(temporal_attribution(&det, &idx, &ok, 0, 0, 1, Conditioning::Conditional).is_err());
        assert!(temporal_attribution(&det, &idx, &ok, 0, 6, 1, Conditioning::Conditional).is_err());
    }

    fn brute_w1(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for pos in 0..=p.len() {
                    let mut v = p.clone();
                    v.insert(pos, n - 1);
                    out.push(v);
                }
            }
            out
        }
        perms(p.len())
            .into_iter()
            .map(|perm| {
                perm.iter()
                    .enumerate()
                    .map(|(i, &j)| euclid(ArrayView1::from(&p[i][..]), ArrayView1::from(&q[j][..])))
                    .sum::<f64>()
                    / p.len() as f64
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn sample_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn w1_simple_cases() {
        let p = vec![vec![0.0, 1.0], vec![2.0, 3.0]];
        assert_eq!(wasserstein1_empirical(&p, &p).unwrap(), 0.0);
        assert_eq!(wasserstein1_empirical(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap(), 5.0);
        assert!(wasserstein1_empirical(&p, &p[..1]).is_err());
        assert!(wasserstein1_empirical(&[], &[]).is_err());
    }

    #[test]
    fn w1_matches_permutation_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in 1..=6 {
            for _ in 0..20 {
                let p = sample_set(&mut rng, n, 3);
                let q = sample_set(&mut rng, n, 3);
                let exact = wasserstein1_empirical(&p, &q).unwrap();
                assert!((exact - brute_w1(&p, &q)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn w1_at_size_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = sample_set(&mut rng, 256, 4);
        let shifted: Vec<Vec<f64>> = p.iter().map(|x| x.iter().map(|v| v + 0.0).collect()).collect();
        assert!(wasserstein1_empirical(&p, &shifted).unwrap().abs() < 1e-12);
        let mut rev = p.clone();
        rev.reverse();
        assert!(wasserstein1_empirical(&p, &rev).unwrap().abs() < 1e-12);
        assert!(wasserstein1_empirical(&sample_set(&mut rng, 257, 1), &sample_set(&mut rng, 257, 1)).is_err());
    }

    #[test]
    fn bias_bound_trivial_cases() {
        let (idx, qs) = setup(3, 5, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut weights = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
        let det = LinearDetector {
            weights: weights.clone(),
            bias: 0.0,
        };
        let q = &qs[7];
        let ids = donors(&idx, q, 1, 4, Conditioning::Conditional).unwrap();
        let same = bias_bound_with_donors(&det, &idx, q, 1, det.lipschitz(1).unwrap(), &ids, &ids).unwrap();
        assert_eq!(same.bias, 0.0);
        assert!(same.holds);

        weights.column_mut(2).fill(0.0);
        let blind = LinearDetector { weights, bias: 0.0 };
        let r = check_bias_bound(&blind, &idx, q, 2, 4, 3).unwrap();
        assert_eq!((r.lipschitz, r.bias, r.bound), (0.0, 0.0, 0.0));
        assert!(r.holds);

        let pca = train_pca_detector(idx.references(), 2).unwrap();
        assert!(matches!(check_bias_bound(&pca, &idx, q, 0, 4, 3), Err(RcaError::UnknownLipschitz(0))));
    }

    #[test]
    fn bias_bound_holds_for_random_linear_detectors() {
        let (idx, qs) = setup(4, 6, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for trial in 0..100 {
            let det = LinearDetector {
                weights: Array2::from_shape_simple_fn((6, 4), || rng.random_range(-3.0..3.0)),
                bias: rng.random_range(-1.0..1.0),
            };
            let q = &qs[rng.random_range(0..qs.len())];
            let j = rng.random_range(0..4);
            let r = check_bias_bound(&det, &idx, q, j, 8, trial).unwrap();
            assert!(r.holds, "trial {trial}: {r:?}");
        }
    }

    #[test]
    fn heatmap_export() {
        let dir = tempfile::tempdir().unwrap();
        let t = AttributionTensor {
            window_start: 40,
            values: array![[1.0, 0.5], [0.25, -2.0], [0.0, 3.0]],
            segment_length: 1,
            k: 3,
            method: "conditional".into(),
        };
        let names = vec!["a".to_string(), "b".to_string()];
        let path = dir.path().join("w40.csv");
        export_heatmap(&t, &names, &path).unwrap();
        let csv = std::fs::read_to_string(&path).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "tau,a,b");
        assert_eq!(csv.lines().count(), 4);
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap()).unwrap();
        assert_eq!(side["window_start"], 40);
        assert_eq!(side["k"], 3);
        assert!(write_heatmap(&t, &names[..1], Vec::new()).is_err());
        assert_eq!(t.peak_offset(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn ignored_sensor_gets_zero(seed in 0u64..500, ignored in 0usize..3, s in 1usize..5) {
            let (idx, qs) = setup(3, 5, seed % 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let det = Blind {
                inner: LinearDetector {
                    weights: Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0)),
                    bias: 0.0,
                },
                ignored,
            };
            let q = &qs[(seed % 90) as usize];
            prop_assert_eq!(conditional_attribution(&det, &idx, q, ignored, 3).unwrap(), 0.0);
            let col = temporal_attribution(&det, &idx, q, ignored, s, 3, Conditioning::Conditional).unwrap();
            prop_assert!(col.iter().all(|&v| v == 0.0));
        }

        #[test]
        fn linear_rows_sum_to_sensor_value(seed in 0u64..500) {
            let (idx, qs) = setup(3, 6, seed % 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let det = LinearDetector {
                weights: Array2::from_shape_simple_fn((6, 3), || rng.random_range(-2.0..2.0)),
                bias: rng.random_range(-1.0..1.0),
            };
            let q = &qs[(seed % 90) as usize];
            let j = (seed % 3) as usize;
            let phi = conditional_attribution(&det, &idx, q, j, 3).unwrap();
            let col = temporal_attribution(&det, &idx, q, j, 1, 3, Conditioning::Conditional).unwrap();
            prop_assert!((col.iter().sum::<f64>() - phi).abs() < 1e-9);
        }

        #[test]
        fn w1_symmetric_and_triangular(seed in 0u64..10_000, n in 1usize..12, dim in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = sample_set(&mut rng, n, dim);
            let b = sample_set(&mut rng, n, dim);
            let c = sample_set(&mut rng, n, dim);
            let ab = wasserstein1_empirical(&a, &b).unwrap();
            prop_assert_eq!(ab.to_bits(), wasserstein1_empirical(&b, &a).unwrap().to_bits());
            let bc = wasserstein1_empirical(&b, &c).unwrap();
            let ac = wasserstein1_empirical(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }
    }
}
