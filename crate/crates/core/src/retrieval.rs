//! Exact K-nearest-neighbor retrieval over a reference set of normal windows.
//!
//! Conditional queries compare masked contexts, either cell-wise (input
//! space) or through an embedding. Ties break by ascending reference index.

use std::ops::Range;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{check_disjoint, mask_sensor, window_starts, LabeledDataset, Window};
use crate::embedding::Embedding;
use crate::error::{RcaError, Result};

/// Distance used by conditional queries.
#[derive(Debug, Clone, PartialEq)]
pub enum SearchSpace {
    Input,
    Embedded(Embedding),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborQueryResult {
    pub indices: Vec<usize>,
    /// Nondecreasing.
    pub distances: Vec<f64>,
}

impl NeighborQueryResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Immutable reference store. Masked reference embeddings are computed per
/// sensor on first use.
#[derive(Debug)]
pub struct NeighborIndex {
    references: Vec<Window>,
    w: usize,
    d: usize,
    stride: usize,
    space: SearchSpace,
    unmasked: Option<Array2<f64>>,
    masked: Vec<OnceLock<Array2<f64>>>,
}

/// What is needed to rebuild an index from its source series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub w: usize,
    pub stride: usize,
    pub space: String,
    pub window_starts: Vec<usize>,
}

fn embed_rows(embedding: &Embedding, rows: impl Iterator<Item = Result<Array1<f64>>>, n: usize) -> Result<Array2<f64>> {
    let k = embedding.dim();
    let mut out = Array2::zeros((n, k));
    for (mut row, v) in out.outer_iter_mut().zip(rows) {
        row.assign(&v?);
    }
    Ok(out)
}

fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// The `k` smallest `(distance, index)` pairs in lexicographic order.
fn smallest_k(mut scored: Vec<(f64, usize)>, k: usize) -> NeighborQueryResult {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    NeighborQueryResult {
        indices: scored.iter().map(|p| p.1).collect(),
        distances: scored.iter().map(|p| p.0).collect(),
    }
}

impl NeighborIndex {
    pub fn from_windows(references: Vec<Window>, space: SearchSpace) -> Result<Self> {
        Self::with_stride(references, 1, space)
    }

    fn with_stride(references: Vec<Window>, stride: usize, space: SearchSpace) -> Result<Self> {
        let first = references
            .first()
            .ok_or_else(|| RcaError::Empty("no reference windows".into()))?;
        let (w, d) = first.data.dim();
        if let Some(bad) = references.iter().find(|r| r.data.dim() != (w, d)) {
            return Err(RcaError::DimensionMismatch {
                what: "reference window",
                expected: w * d,
                found: bad.data.len(),
            });
        }
        let unmasked = match &space {
            SearchSpace::Input => None,
            SearchSpace::Embedded(e) => Some(embed_rows(
                e,
                references.iter().map(|r| e.embed_window(r)),
                references.len(),
            )?),
        };
        Ok(Self {
            masked: (0..d).map(|_| OnceLock::new()).collect(),
            references,
            w,
            d,
            stride,
            space,
            unmasked,
        })
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }

    pub fn window_shape(&self) -> (usize, usize) {
        (self.w, self.d)
    }

    pub fn references(&self) -> &[Window] {
        &self.references
    }

    pub fn reference(&self, i: usize) -> &Window {
        &self.references[i]
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn embedding(&self) -> Option<&Embedding> {
        match &self.space {
            SearchSpace::Input => None,
            SearchSpace::Embedded(e) => Some(e),
        }
    }

    pub fn manifest(&self) -> IndexManifest {
        IndexManifest {
            w: self.w,
            stride: self.stride,
            space: match &self.space {
                SearchSpace::Input => "input".into(),
                SearchSpace::Embedded(e) => e.kind().into(),
            },
            window_starts: self.references.iter().map(|r| r.start).collect(),
        }
    }

    fn check_query(&self, query: &Window, j: usize, k: usize) -> Result<()> {
        if query.data.dim() != (self.w, self.d) {
            return Err(RcaError::DimensionMismatch {
                what: "query window",
                expected: self.w * self.d,
                found: query.data.len(),
            });
        }
        if j >= self.d {
            return Err(RcaError::OutOfRange(format!("sensor {j} not in 0..{}", self.d)));
        }
        self.check_k(k)
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.len() {
            return Err(RcaError::InvalidParameter(format!(
                "K = {k} not in 1..={} (index size)",
                self.len()
            )));
        }
        Ok(())
    }

    /// Frobenius distance between the sensor-`j` masked contexts of the
    /// query and reference `i`.
    pub fn masked_input_distance(&self, query: &Window, i: usize, j: usize) -> f64 {
        let r = &self.references[i].data;
        let mut acc = 0.0;
        for (qrow, rrow) in query.data.outer_iter().zip(r.outer_iter()) {
            for (c, (q, x)) in qrow.iter().zip(rrow).enumerate() {
                if c != j {
                    acc += (q - x) * (q - x);
                }
            }
        }
        acc.sqrt()
    }

    /// Masked embeddings of every reference for sensor `j`.
    pub fn masked_embeddings(&self, j: usize) -> Result<&Array2<f64>> {
        let emb = self
            .embedding()
            .ok_or_else(|| RcaError::InvalidParameter("index has no embedding".into()))?;
        if j >= self.d {
            return Err(RcaError::OutOfRange(format!("sensor {j} not in 0..{}", self.d)));
        }
        if let Some(m) = self.masked[j].get() {
            return Ok(m);
        }
        let table = embed_rows(
            emb,
            self.references
                .iter()
                .map(|r| mask_sensor(r, j).and_then(|c| emb.embed_context(&c))),
            self.len(),
        )?;
        Ok(self.masked[j].get_or_init(|| table))
    }

    /// Conditional KNN in input space regardless of the index's own space.
    pub fn knn_input(&self, query: &Window, j: usize, k: usize) -> Result<NeighborQueryResult> {
        self.check_query(query, j, k)?;
        let scored = (0..self.len())
            .map(|i| (self.masked_input_distance(query, i, j), i))
            .collect();
        Ok(smallest_k(scored, k))
    }

    /// Conditional KNN from an already embedded masked query.
    pub fn knn_embedded(&self, query_embedding: ArrayView1<'_, f64>, j: usize, k: usize) -> Result<NeighborQueryResult> {
        self.check_k(k)?;
        let table = self.masked_embeddings(j)?;
        if query_embedding.len() != table.ncols() {
            return Err(RcaError::DimensionMismatch {
                what: "query embedding",
                expected: table.ncols(),
                found: query_embedding.len(),
            });
        }
        let scored = table
            .outer_iter()
            .enumerate()
            .map(|(i, row)| (euclidean(query_embedding, row), i))
            .collect();
        Ok(smallest_k(scored, k))
    }

    /// Distances from the query's masked context to every reference in the
    /// index's own space.
    pub fn masked_distances(&self, query: &Window, j: usize) -> Result<Vec<f64>> {
        self.check_query(query, j, 1)?;
        match &self.space {
            SearchSpace::Input => Ok((0..self.len()).map(|i| self.masked_input_distance(query, i, j)).collect()),
            SearchSpace::Embedded(e) => {
                let q = e.embed_context(&mask_sensor(query, j)?)?;
                let table = self.masked_embeddings(j)?;
                Ok(table.outer_iter().map(|row| euclidean(q.view(), row)).collect())
            }
        }
    }
}

/// Index over the stride-aligned windows lying entirely inside the train
/// range.
pub fn build_index(dataset: &LabeledDataset, w: usize, stride: usize, space: SearchSpace) -> Result<NeighborIndex> {
    let windows = normal_windows(dataset, w, stride)?;
    NeighborIndex::with_stride(windows, stride, space)
}

/// Windows fully contained in `dataset.train_range`.
pub fn normal_windows(dataset: &LabeledDataset, w: usize, stride: usize) -> Result<Vec<Window>> {
    windows_in(dataset, &dataset.train_range, w, stride)
}

/// Windows fully contained in `range`, which must not touch any event.
pub fn windows_in(dataset: &LabeledDataset, range: &Range<usize>, w: usize, stride: usize) -> Result<Vec<Window>> {
    check_disjoint(range, &dataset.events)?;
    if range.end > dataset.series.len() {
        return Err(RcaError::OutOfRange(format!("range {range:?} beyond series end")));
    }
    if range.len() < w {
        return Err(RcaError::Empty(format!(
            "normal range {range:?} shorter than window length {w}"
        )));
    }
    window_starts(range.len(), w, stride)?
        .map(|s| Window::from_series(&dataset.series, range.start + s, w))
        .collect()
}

/// Sensor-specific neighbors of `query` in the index's space.
pub fn knn_conditional(index: &NeighborIndex, query: &Window, j: usize, k: usize) -> Result<NeighborQueryResult> {
    match &index.space {
        SearchSpace::Input => index.knn_input(query, j, k),
        SearchSpace::Embedded(e) => {
            index.check_query(query, j, k)?;
            let q = e.embed_context(&mask_sensor(query, j)?)?;
            index.knn_embedded(q.view(), j, k)
        }
    }
}

/// One neighborhood for all sensors, from unmasked windows.
pub fn knn_shared(index: &NeighborIndex, query: &Window, k: usize) -> Result<NeighborQueryResult> {
    index.check_query(query, 0, k)?;
    let scored: Vec<(f64, usize)> = match (&index.space, &index.unmasked) {
        (SearchSpace::Embedded(e), Some(table)) => {
            let q = e.embed_window(query)?;
            table
                .outer_iter()
                .enumerate()
                .map(|(i, row)| (euclidean(q.view(), row), i))
                .collect()
        }
        _ => index
            .references
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d2: f64 = query.data.iter().zip(r.data.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2.sqrt(), i)
            })
            .collect(),
    };
    Ok(smallest_k(scored, k))
}

/// `k` distinct references drawn uniformly with `seed`, reported with their
/// masked-context distances to the query and sorted like a KNN result.
pub fn knn_unconditional(
    index: &NeighborIndex,
    query: &Window,
    j: usize,
    k: usize,
    seed: u64,
) -> Result<NeighborQueryResult> {
    index.check_query(query, j, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = rand::seq::index::sample(&mut rng, index.len(), k);
    let all = index.masked_distances(query, j)?;
    let scored: Vec<(f64, usize)> = draw.iter().map(|i| (all[i], i)).collect();
    Ok(smallest_k(scored, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProbeReport {
    pub n_references: usize,
    pub input_dim: usize,
    pub embedding_dim: usize,
    pub n_queries: usize,
    pub repetitions: usize,
    pub input_seconds_per_query: f64,
    pub embedded_seconds_per_query: f64,
    /// Input time over embedded time.
    pub speedup: f64,
}

/// Mean per-query wall time of input-space and embedded-space conditional
/// KNN over the same `(window, sensor)` queries. Query embeddings and the
/// masked reference tables are prepared before timing.
pub fn query_cost_probe(
    index: &NeighborIndex,
    queries: &[(Window, usize)],
    k: usize,
    repetitions: usize,
) -> Result<CostProbeReport> {
    if queries.is_empty() || repetitions == 0 {
        return Err(RcaError::InvalidParameter("need at least one query and repetition".into()));
    }
    let emb = index
        .embedding()
        .ok_or_else(|| RcaError::InvalidParameter("cost probe needs an embedded index".into()))?;
    let mut embedded_queries = Vec::with_capacity(queries.len());
    for (q, j) in queries {
        index.check_query(q, *j, k)?;
        index.masked_embeddings(*j)?;
        embedded_queries.push(emb.embed_context(&mask_sensor(q, *j)?)?);
    }
    let mut sink = 0usize;
    let t0 = Instant::now();
    for _ in 0..repetitions {
        for (q, j) in queries {
            sink ^= index.knn_input(q, *j, k)?.indices[0];
        }
    }
    let input = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    for _ in 0..repetitions {
        for (e, (_, j)) in embedded_queries.iter().zip(queries) {
            sink ^= index.knn_embedded(e.view(), *j, k)?.indices[0];
        }
    }
    let embedded = t1.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    let n = (queries.len() * repetitions) as f64;
    Ok(CostProbeReport {
        n_references: index.len(),
        input_dim: index.w * index.d,
        embedding_dim: emb.dim(),
        n_queries: queries.len(),
        repetitions,
        input_seconds_per_query: input / n,
        embedded_seconds_per_query: embedded / n,
        speedup: input / embedded.max(f64::MIN_POSITIVE),
    })
}
