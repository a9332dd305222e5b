//! Series container, z-score normalization, windowing, event labels and
//! sensor masking.
//!
//! Every later stage works on z-scored values. Masking a sensor therefore
//! means zeroing its column, which imputes the training mean.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{RcaError, Result};

/// Default floor below which a training standard deviation counts as constant.
pub const DEFAULT_STD_FLOOR: f64 = 1e-8;

/// A `T x d` multivariate series with named sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMatrix {
    values: Array2<f64>,
    sensor_names: Vec<String>,
    timestamps: Option<Vec<i64>>,
}

impl SeriesMatrix {
    pub fn new(
        values: Array2<f64>,
        sensor_names: Vec<String>,
        timestamps: Option<Vec<i64>>,
    ) -> Result<Self> {
        if sensor_names.len() != values.ncols() {
            return Err(RcaError::DimensionMismatch {
                what: "sensor names",
                expected: values.ncols(),
                found: sensor_names.len(),
            });
        }
        for ((row, col), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(RcaError::NonFinite {
                    row,
                    column: sensor_names[col].clone(),
                });
            }
        }
        if let Some(ts) = &timestamps {
            if ts.len() != values.nrows() {
                return Err(RcaError::DimensionMismatch {
                    what: "timestamps",
                    expected: values.nrows(),
                    found: ts.len(),
                });
            }
            if let Some(pos) = ts.windows(2).position(|p| p[1] <= p[0]) {
                return Err(RcaError::InvalidParameter(format!(
                    "timestamps not strictly increasing at row {}",
                    pos + 1
                )));
            }
        }
        Ok(Self {
            values,
            sensor_names,
            timestamps,
        })
    }

    /// Series with generated sensor names `s0..s{d-1}`.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let names = (0..values.ncols()).map(|j| format!("s{j}")).collect();
        Self::new(values, names, None)
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// Number of sensors `d`.
    pub fn n_sensors(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn sensor_names(&self) -> &[String] {
        &self.sensor_names
    }

    pub fn timestamps(&self) -> Option<&[i64]> {
        self.timestamps.as_deref()
    }

    pub fn sensor_index(&self, name: &str) -> Result<usize> {
        self.sensor_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| RcaError::UnknownSensor(name.to_string()))
    }

    /// Same names and timestamps, new values of identical shape.
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(RcaError::DimensionMismatch {
                what: "series values",
                expected: self.values.len(),
                found: values.len(),
            });
        }
        Self::new(values, self.sensor_names.clone(), self.timestamps.clone())
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Parse a series from CSV text. The header names the sensors; when
/// `has_timestamp` is set the first column holds integer timestamps.
pub fn read_csv<R: Read>(reader: R, has_timestamp: bool) -> Result<SeriesMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| RcaError::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let skip = usize::from(has_timestamp);
    if headers.len() <= skip {
        return Err(RcaError::Empty("csv header has no sensor columns".into()));
    }
    let names: Vec<String> = headers.iter().skip(skip).map(str::to_string).collect();
    let d = names.len();

    let mut data = Vec::new();
    let mut timestamps = Vec::new();
    let mut rows = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| RcaError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + skip {
            return Err(RcaError::Csv {
                line,
                message: format!("expected {} fields, found {}", d + skip, record.len()),
            });
        }
        if has_timestamp {
            let ts: i64 = record[0].parse().map_err(|_| RcaError::Csv {
                line,
                message: format!("timestamp '{}' is not an integer", &record[0]),
            })?;
            timestamps.push(ts);
        }
        for (j, cell) in record.iter().skip(skip).enumerate() {
            let v: f64 = cell.parse().map_err(|_| RcaError::Csv {
                line,
                message: format!("column '{}': '{}' is not numeric", names[j], cell),
            })?;
            if !v.is_finite() {
                return Err(RcaError::NonFinite {
                    row: rows,
                    column: names[j].clone(),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(RcaError::Empty("csv has no data rows".into()));
    }
    let values = Array2::from_shape_vec((rows, d), data).expect("row widths checked");
    SeriesMatrix::new(values, names, has_timestamp.then_some(timestamps))
}

pub fn load_csv(path: impl AsRef<Path>, has_timestamp: bool) -> Result<SeriesMatrix> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| RcaError::io(path, e))?;
    read_csv(std::io::BufReader::new(file), has_timestamp)
}

/// Serialize a series as CSV. Values use the shortest decimal that round-trips.
pub fn write_csv<W: Write>(series: &SeriesMatrix, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let map_err = |e: csv::Error| RcaError::Csv {
        line: 0,
        message: e.to_string(),
    };
    let mut header: Vec<String> = Vec::with_capacity(series.n_sensors() + 1);
    if series.timestamps.is_some() {
        header.push("timestamp".into());
    }
    header.extend(series.sensor_names.iter().cloned());
    wtr.write_record(&header).map_err(map_err)?;
    let mut record = Vec::with_capacity(header.len());
    for (t, row) in series.values.outer_iter().enumerate() {
        record.clear();
        if let Some(ts) = &series.timestamps {
            record.push(ts[t].to_string());
        }
        record.extend(row.iter().map(|v| format!("{v:?}")));
        wtr.write_record(&record).map_err(map_err)?;
    }
    wtr.flush().map_err(|e| RcaError::Csv {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(())
}

pub fn save_csv(series: &SeriesMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(series, &mut buf)?;
    write_atomic(path, &buf)
}

/// Write through a temporary sibling file and rename into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, bytes).map_err(|e| RcaError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RcaError::io(path, e))
}

/// Per-sensor z-score statistics fitted on a normal range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant_mask: Vec<bool>,
}

impl NormalizationStats {
    pub fn n_sensors(&self) -> usize {
        self.mean.len()
    }

    /// Identity statistics (mean 0, std 1).
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            constant_mask: vec![false; d],
        }
    }
}

/// Fit population mean and standard deviation over `range`. Sensors whose
/// standard deviation falls below `std_floor` are flagged constant and get
/// `std = 1`.
pub fn fit_normalization(
    series: &SeriesMatrix,
    range: Range<usize>,
    std_floor: f64,
) -> Result<NormalizationStats> {
    if range.is_empty() {
        return Err(RcaError::Empty("normalization range".into()));
    }
    if range.end > series.len() {
        return Err(RcaError::OutOfRange(format!(
            "normalization range {range:?} exceeds series length {}",
            series.len()
        )));
    }
    if !(std_floor > 0.0) {
        return Err(RcaError::InvalidParameter("std_floor must be > 0".into()));
    }
    let slice = series.values.slice(s![range.clone(), ..]);
    let n = range.len() as f64;
    let d = series.n_sensors();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    let mut constant_mask = vec![false; d];
    for j in 0..d {
        let col = slice.column(j);
        let m = col.sum() / n;
        let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        let sd = var.sqrt();
        mean[j] = m;
        if sd < std_floor {
            constant_mask[j] = true;
            std[j] = 1.0;
        } else {
            std[j] = sd;
        }
    }
    Ok(NormalizationStats {
        mean,
        std,
        constant_mask,
    })
}

fn check_stats(series: &SeriesMatrix, stats: &NormalizationStats) -> Result<()> {
    if stats.n_sensors() != series.n_sensors() {
        return Err(RcaError::DimensionMismatch {
            what: "normalization stats",
            expected: series.n_sensors(),
            found: stats.n_sensors(),
        });
    }
    Ok(())
}

/// `(x - mean) / std` per sensor.
pub fn apply_normalization(
    series: &SeriesMatrix,
    stats: &NormalizationStats,
) -> Result<SeriesMatrix> {
    check_stats(series, stats)?;
    let mut values = series.values.clone();
    for (j, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
        let (m, sd) = (stats.mean[j], stats.std[j]);
        col.mapv_inplace(|x| (x - m) / sd);
    }
    series.with_values(values)
}

/// Inverse of [`apply_normalization`].
pub fn denormalize(series: &SeriesMatrix, stats: &NormalizationStats) -> Result<SeriesMatrix> {
    check_stats(series, stats)?;
    let mut values = series.values.clone();
    for (j, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
        let (m, sd) = (stats.mean[j], stats.std[j]);
        col.mapv_inplace(|x| x * sd + m);
    }
    series.with_values(values)
}

/// A `w x d` slice of a series starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub data: Array2<f64>,
}

impl Window {
    pub fn from_series(series: &SeriesMatrix, start: usize, w: usize) -> Result<Self> {
        if w == 0 || start + w > series.len() {
            return Err(RcaError::OutOfRange(format!(
                "window [{start}, {}) outside series of length {}",
                start + w,
                series.len()
            )));
        }
        Ok(Self {
            start,
            data: series.values.slice(s![start..start + w, ..]).to_owned(),
        })
    }

    /// Window length `w`.
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn n_sensors(&self) -> usize {
        self.data.ncols()
    }

    /// Half-open time range covered by the window.
    pub fn span(&self) -> Range<usize> {
        self.start..self.start + self.len()
    }

    /// Index of the last timestep covered.
    pub fn end(&self) -> usize {
        self.start + self.len() - 1
    }

    /// Row-major (time-major) flattening of length `w * d`.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.iter().copied().collect()
    }
}

/// Windows at starts `0, stride, 2*stride, ...` with `start + w <= T`.
pub fn sliding_windows(series: &SeriesMatrix, w: usize, stride: usize) -> Result<Vec<Window>> {
    window_starts(series.len(), w, stride)?
        .map(|start| Window::from_series(series, start, w))
        .collect()
}

/// Start indices produced by [`sliding_windows`].
pub fn window_starts(
    len: usize,
    w: usize,
    stride: usize,
) -> Result<impl Iterator<Item = usize>> {
    if w == 0 || stride == 0 {
        return Err(RcaError::InvalidParameter(
            "window length and stride must be >= 1".into(),
        ));
    }
    if w > len {
        return Err(RcaError::OutOfRange(format!(
            "window length {w} exceeds series length {len}"
        )));
    }
    Ok((0..=len - w).step_by(stride))
}

/// A window whose sensor `j` column has been replaced by zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedContext {
    pub base: Window,
    pub masked_sensor: usize,
    pub representation: Array2<f64>,
}

impl MaskedContext {
    /// Put `column` back into the masked slot.
    pub fn unmask(&self, column: ArrayView1<'_, f64>) -> Result<Window> {
        if column.len() != self.representation.nrows() {
            return Err(RcaError::DimensionMismatch {
                what: "unmask column",
                expected: self.representation.nrows(),
                found: column.len(),
            });
        }
        let mut data = self.representation.clone();
        data.column_mut(self.masked_sensor).assign(&column);
        Ok(Window {
            start: self.base.start,
            data,
        })
    }
}

pub fn mask_sensor(window: &Window, j: usize) -> Result<MaskedContext> {
    if j >= window.n_sensors() {
        return Err(RcaError::OutOfRange(format!(
            "sensor {j} not in 0..{}",
            window.n_sensors()
        )));
    }
    let mut representation = window.data.clone();
    representation.column_mut(j).fill(0.0);
    Ok(MaskedContext {
        base: window.clone(),
        masked_sensor: j,
        representation,
    })
}

/// A labeled anomaly: `[onset, onset + duration)` with its root-cause sensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub onset: usize,
    pub duration: usize,
    pub ground_truth: BTreeSet<usize>,
}

impl AnomalyEvent {
    pub fn new(onset: usize, duration: usize, ground_truth: BTreeSet<usize>) -> Result<Self> {
        if duration == 0 {
            return Err(RcaError::InvalidParameter("event duration must be >= 1".into()));
        }
        if ground_truth.is_empty() {
            return Err(RcaError::InvalidParameter(
                "event needs at least one root-cause sensor".into(),
            ));
        }
        Ok(Self {
            onset,
            duration,
            ground_truth,
        })
    }

    pub fn interval(&self) -> Range<usize> {
        self.onset..self.onset + self.duration
    }

    pub fn intersects(&self, range: &Range<usize>) -> bool {
        range.start < self.onset + self.duration && self.onset < range.end
    }

    fn validate(&self, series_len: usize, d: usize) -> Result<()> {
        if self.duration == 0 || self.ground_truth.is_empty() {
            return Err(RcaError::InvalidParameter(format!(
                "event at {} has empty duration or no sensors",
                self.onset
            )));
        }
        if self.onset + self.duration > series_len {
            return Err(RcaError::OutOfRange(format!(
                "event {:?} beyond series length {series_len}",
                self.interval()
            )));
        }
        if let Some(&j) = self.ground_truth.iter().find(|&&j| j >= d) {
            return Err(RcaError::OutOfRange(format!("event sensor {j} not in 0..{d}")));
        }
        Ok(())
    }
}

/// Series plus labeled events and a guaranteed-normal training range.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub series: SeriesMatrix,
    pub events: Vec<AnomalyEvent>,
    pub train_range: Range<usize>,
}

impl LabeledDataset {
    pub fn new(
        series: SeriesMatrix,
        events: Vec<AnomalyEvent>,
        train_range: Range<usize>,
    ) -> Result<Self> {
        let ds = Self {
            series,
            events,
            train_range,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Bounds checks plus train/event disjointness.
    pub fn validate(&self) -> Result<()> {
        let (len, d) = (self.series.len(), self.series.n_sensors());
        if self.train_range.is_empty() || self.train_range.end > len {
            return Err(RcaError::OutOfRange(format!(
                "train range {:?} invalid for series of length {len}",
                self.train_range
            )));
        }
        for ev in &self.events {
            ev.validate(len, d)?;
        }
        check_disjoint(&self.train_range, &self.events)
    }
}

/// Fails with [`RcaError::Leakage`] when `range` overlaps any event.
pub fn check_disjoint(range: &Range<usize>, events: &[AnomalyEvent]) -> Result<()> {
    match events.iter().find(|ev| ev.intersects(range)) {
        Some(ev) => Err(RcaError::Leakage(format!(
            "normal range {range:?} overlaps event {:?}",
            ev.interval()
        ))),
        None => Ok(()),
    }
}

/// All stride-aligned windows whose span intersects the event interval.
pub fn windows_of_event(
    dataset: &LabeledDataset,
    event: &AnomalyEvent,
    w: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    event.validate(dataset.series.len(), dataset.series.n_sensors())?;
    window_starts(dataset.series.len(), w, stride)?
        .filter(|&start| event.intersects(&(start..start + w)))
        .map(|start| Window::from_series(&dataset.series, start, w))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelRecord {
    onset: usize,
    duration: usize,
    sensors: Vec<String>,
}

/// Parse labels JSON, resolving sensor names against the series header.
pub fn parse_labels(json: &str, series: &SeriesMatrix) -> Result<Vec<AnomalyEvent>> {
    let records: Vec<LabelRecord> = serde_json::from_str(json)?;
    records
        .into_iter()
        .map(|r| {
            let sensors = r
                .sensors
                .iter()
                .map(|name| series.sensor_index(name))
                .collect::<Result<BTreeSet<_>>>()?;
            let ev = AnomalyEvent::new(r.onset, r.duration, sensors)?;
            ev.validate(series.len(), series.n_sensors())?;
            Ok(ev)
        })
        .collect()
}

pub fn load_labels(path: impl AsRef<Path>, series: &SeriesMatrix) -> Result<Vec<AnomalyEvent>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| RcaError::io(path, e))?;
    parse_labels(&text, series)
}

pub fn labels_to_json(events: &[AnomalyEvent], sensor_names: &[String]) -> Result<String> {
    let records: Vec<LabelRecord> = events
        .iter()
        .map(|ev| LabelRecord {
            onset: ev.onset,
            duration: ev.duration,
            sensors: ev
                .ground_truth
                .iter()
                .map(|&j| sensor_names[j].clone())
                .collect(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

pub fn save_labels(
    events: &[AnomalyEvent],
    sensor_names: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    write_atomic(path, labels_to_json(events, sensor_names)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn series(values: Array2<f64>) -> SeriesMatrix {
        SeriesMatrix::from_values(values).unwrap()
    }

    #[test]
    fn parses_small_csv() {
        let s = read_csv("a,b\n1,2\n3,4\n5.5,-6\n".as_bytes(), false).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.n_sensors(), 2);
        assert_eq!(s.values(), array![[1.0, 2.0], [3.0, 4.0], [5.5, -6.0]]);
        assert_eq!(s.sensor_names(), ["a", "b"]);
    }

    #[test]
    fn parses_timestamp_column() {
        let s = read_csv("timestamp,a\n10,1\n20,2\n".as_bytes(), true).unwrap();
        assert_eq!(s.timestamps(), Some(&[10, 20][..]));
        assert_eq!(s.n_sensors(), 1);
        let err = read_csv("timestamp,a\n10,1\n10,2\n".as_bytes(), true).unwrap_err();
        assert!(matches!(err, RcaError::InvalidParameter(_)));
    }

    #[test]
    fn nan_cell_names_row_and_column() {
        let err = read_csv("a,b\n1,2\n3,NaN\n".as_bytes(), false).unwrap_err();
        match err {
            RcaError::NonFinite { row, column } => {
                assert_eq!(row, 1);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_line() {
        let err = read_csv("a,b\n1,2\n3\n".as_bytes(), false).unwrap_err();
        assert!(matches!(err, RcaError::Csv { line: 3, .. }), "{err:?}");
        let err = read_csv("a,b\n1,x\n".as_bytes(), false).unwrap_err();
        assert!(matches!(err, RcaError::Csv { line: 2, .. }), "{err:?}");
        assert!(matches!(
            read_csv("a,b\n".as_bytes(), false).unwrap_err(),
            RcaError::Empty(_)
        ));
        assert!(read_csv("".as_bytes(), false).is_err());
    }

    #[test]
    fn population_std() {
        let s = series(array![[0.0, 5.0], [2.0, 5.0]]);
        let st = fit_normalization(&s, 0..2, DEFAULT_STD_FLOOR).unwrap();
        assert_eq!(st.mean, vec![1.0, 5.0]);
        assert_eq!(st.std, vec![1.0, 1.0]);
        assert_eq!(st.constant_mask, vec![false, true]);
        assert!(fit_normalization(&s, 1..1, DEFAULT_STD_FLOOR).is_err());
        assert!(fit_normalization(&s, 0..3, DEFAULT_STD_FLOOR).is_err());
    }

    #[test]
    fn constant_column() {
        let s = series(array![[5.0], [5.0], [5.0]]);
        let st = fit_normalization(&s, 0..3, DEFAULT_STD_FLOOR).unwrap();
        assert_eq!((st.mean[0], st.std[0], st.constant_mask[0]), (5.0, 1.0, true));
        let z = apply_normalization(&s, &st).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_formula_and_identity() {
        let s = series(array![[3.0], [7.0]]);
        let st = NormalizationStats {
            mean: vec![1.0],
            std: vec![2.0],
            constant_mask: vec![false],
        };
        let z = apply_normalization(&s, &st).unwrap();
        assert_eq!(z.values()[[0, 0]], 1.0);
        let id = apply_normalization(&s, &NormalizationStats::identity(1)).unwrap();
        assert_eq!(id, s);
        assert!(apply_normalization(&s, &NormalizationStats::identity(2)).is_err());
    }

    #[test]
    fn window_counts() {
        let s = series(Array2::zeros((5, 2)));
        assert_eq!(sliding_windows(&s, 5, 1).unwrap().len(), 1);
        let s = series(Array2::from_shape_fn((10, 2), |(t, j)| (t * 10 + j) as f64));
        let ws = sliding_windows(&s, 3, 2).unwrap();
        assert_eq!(ws.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
        for w in &ws {
            for r in 0..3 {
                assert_eq!(w.data.row(r), s.values().row(w.start + r));
            }
        }
        assert!(sliding_windows(&s, 11, 1).is_err());
        assert!(sliding_windows(&s, 3, 0).is_err());
    }

    #[test]
    fn masking() {
        let s = series(array![[1.0, 2.0], [3.0, 4.0]]);
        let w = Window::from_series(&s, 0, 2).unwrap();
        let m = mask_sensor(&w, 0).unwrap();
        assert_eq!(m.representation, array![[0.0, 2.0], [0.0, 4.0]]);
        assert_eq!(m.unmask(w.data.column(0)).unwrap(), w);
        assert!(mask_sensor(&w, 2).is_err());

        let one = series(array![[1.5], [-2.0]]);
        let w1 = Window::from_series(&one, 0, 2).unwrap();
        assert!(mask_sensor(&w1, 0)
            .unwrap()
            .representation
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn masked_distance_ignores_masked_column() {
        let s = series(Array2::from_shape_fn((8, 3), |(t, j)| {
            ((t * 7 + j * 3) % 5) as f64 - 1.3 * j as f64
        }));
        let a = Window::from_series(&s, 0, 4).unwrap();
        let b = Window::from_series(&s, 3, 4).unwrap();
        let (ma, mb) = (mask_sensor(&a, 1).unwrap(), mask_sensor(&b, 1).unwrap());
        let full: f64 = (&ma.representation - &mb.representation)
            .iter()
            .map(|x| x * x)
            .sum();
        let subset: f64 = [0usize, 2]
            .iter()
            .map(|&j| {
                (&a.data.column(j) - &b.data.column(j))
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
            })
            .sum();
        assert!((full - subset).abs() < 1e-12);
    }

    fn dataset(len: usize, events: Vec<AnomalyEvent>, train: Range<usize>) -> Result<LabeledDataset> {
        LabeledDataset::new(series(Array2::zeros((len, 2))), events, train)
    }

    #[test]
    fn event_windows() {
        let ev = AnomalyEvent::new(0, 10, [0].into()).unwrap();
        let ds = dataset(10, vec![ev.clone()], 0..0).unwrap_err();
        assert!(matches!(ds, RcaError::OutOfRange(_)));

        let whole = LabeledDataset {
            series: series(Array2::zeros((10, 2))),
            events: vec![ev.clone()],
            train_range: 0..1,
        };
        assert_eq!(windows_of_event(&whole, &ev, 3, 1).unwrap().len(), 8);

        let ds = dataset(20, vec![], 0..5).unwrap();
        let point = AnomalyEvent::new(10, 1, [1].into()).unwrap();
        let ws = windows_of_event(&ds, &point, 3, 1).unwrap();
        assert_eq!(ws.iter().map(|w| w.start).collect::<Vec<_>>(), vec![8, 9, 10]);

        let tiny = dataset(20, vec![], 0..5).unwrap();
        let far = AnomalyEvent::new(19, 1, [0].into()).unwrap();
        assert!(windows_of_event(&tiny, &far, 3, 5).unwrap().is_empty());
    }

    #[test]
    fn leakage_detected() {
        let ev = AnomalyEvent::new(4, 3, [0].into()).unwrap();
        let err = dataset(20, vec![ev.clone()], 0..5).unwrap_err();
        assert!(matches!(err, RcaError::Leakage(_)));
        assert!(dataset(20, vec![ev], 0..4).is_ok());
    }

    #[test]
    fn labels_roundtrip() {
        let s = read_csv("a,b,c\n1,2,3\n4,5,6\n7,8,9\n".as_bytes(), false).unwrap();
        let json = r#"[{"onset":1,"duration":2,"sensors":["c","a"]}]"#;
        let evs = parse_labels(json, &s).unwrap();
        assert_eq!(evs[0].ground_truth, [0, 2].into());
        let back = parse_labels(&labels_to_json(&evs, s.sensor_names()).unwrap(), &s).unwrap();
        assert_eq!(back, evs);
        let bad = r#"[{"onset":1,"duration":2,"sensors":["zz"]}]"#;
        assert!(matches!(parse_labels(bad, &s), Err(RcaError::UnknownSensor(_))));
        let oob = r#"[{"onset":2,"duration":2,"sensors":["a"]}]"#;
        assert!(parse_labels(oob, &s).is_err());
    }
}
