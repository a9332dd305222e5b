//! Window anomaly detectors `f: R^{w x d} -> R`, score thresholds and
//! detection-quality metrics.
//!
//! Windows are flattened time-major (row-major) before they reach a model.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, Window};
use crate::error::{RcaError, Result};
use crate::nn::{self, Activation, DenseNet, SquaredError, TrainConfig};
use crate::pca::PrincipalSubspace;

/// Anything that maps a window to an anomaly score.
pub trait Scorer: Send + Sync {
    /// Window shape `(w, d)` the scorer accepts.
    fn window_shape(&self) -> (usize, usize);

    fn score(&self, window: ArrayView2<'_, f64>) -> Result<f64>;

    /// Scores in input order. Implementations may batch internally but must
    /// match the single-window scores.
    fn score_batch(&self, windows: &[Array2<f64>]) -> Result<Vec<f64>> {
        windows.iter().map(|w| self.score(w.view())).collect()
    }

    /// Lipschitz constant of the score with respect to sensor `j`'s
    /// trajectory (Euclidean norm), when known.
    fn lipschitz(&self, _sensor: usize) -> Option<f64> {
        None
    }

    fn check_shape(&self, window: ArrayView2<'_, f64>) -> Result<()> {
        let (w, d) = self.window_shape();
        if window.dim() != (w, d) {
            return Err(RcaError::DimensionMismatch {
                what: "window shape",
                expected: w * d,
                found: window.len(),
            });
        }
        Ok(())
    }
}

fn flatten(window: ArrayView2<'_, f64>) -> Vec<f64> {
    window.iter().copied().collect()
}

fn stack_windows(windows: &[Window]) -> Result<Array2<f64>> {
    let first = windows
        .first()
        .ok_or_else(|| RcaError::Empty("no normal windows".into()))?;
    let (w, d) = first.data.dim();
    let mut out = Array2::zeros((windows.len(), w * d));
    for (row, win) in out.outer_iter_mut().zip(windows) {
        if win.data.dim() != (w, d) {
            return Err(RcaError::DimensionMismatch {
                what: "window shape",
                expected: w * d,
                found: win.data.len(),
            });
        }
        ndarray::Zip::from(row).and(&win.data.view().into_shape_with_order(w * d).expect("owned windows are contiguous")).for_each(|o, &v| *o = v);
    }
    Ok(out)
}

pub(crate) fn stack_flat(windows: &[Window]) -> Result<Array2<f64>> {
    stack_windows(windows)
}

/// Squared residual after projecting onto a principal subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaDetector {
    pub w: usize,
    pub d: usize,
    pub subspace: PrincipalSubspace,
}

impl Scorer for PcaDetector {
    fn window_shape(&self) -> (usize, usize) {
        (self.w, self.d)
    }

    fn score(&self, window: ArrayView2<'_, f64>) -> Result<f64> {
        self.check_shape(window)?;
        let x = ndarray::Array1::from(flatten(window));
        Ok(self.subspace.residual_sq(x.view()))
    }
}

/// Dense autoencoder; the score is the summed squared reconstruction error.
#[derive(Debug, Clone, PartialEq)]
pub struct AeDetector {
    pub w: usize,
    pub d: usize,
    pub net: DenseNet,
}

impl Scorer for AeDetector {
    fn window_shape(&self) -> (usize, usize) {
        (self.w, self.d)
    }

    fn score(&self, window: ArrayView2<'_, f64>) -> Result<f64> {
        self.check_shape(window)?;
        let x = flatten(window);
        let (out, _) = self.net.forward(&x)?;
        Ok(x.iter().zip(out.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    fn score_batch(&self, windows: &[Array2<f64>]) -> Result<Vec<f64>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let (w, d) = self.window_shape();
        let mut x = Array2::zeros((windows.len(), w * d));
        for (mut row, win) in x.outer_iter_mut().zip(windows) {
            self.check_shape(win.view())?;
            row.iter_mut().zip(win.iter()).for_each(|(o, &v)| *o = v);
        }
        let out = self.net.predict_batch(x.view())?;
        Ok(x.outer_iter()
            .zip(out.outer_iter())
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum())
            .collect())
    }
}

/// `f(W) = <A, W> + b`, mainly for attribution identities and the bias bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDetector {
    pub weights: Array2<f64>,
    pub bias: f64,
}

impl LinearDetector {
    /// Constant score `c` for windows of shape `(w, d)`.
    pub fn constant(w: usize, d: usize, c: f64) -> Self {
        Self {
            weights: Array2::zeros((w, d)),
            bias: c,
        }
    }

    /// Sum of all entries.
    pub fn sum(w: usize, d: usize) -> Self {
        Self {
            weights: Array2::ones((w, d)),
            bias: 0.0,
        }
    }
}

impl Scorer for LinearDetector {
    fn window_shape(&self) -> (usize, usize) {
        self.weights.dim()
    }

    fn score(&self, window: ArrayView2<'_, f64>) -> Result<f64> {
        self.check_shape(window)?;
        Ok(self
            .weights
            .iter()
            .zip(window.iter())
            .map(|(a, x)| a * x)
            .sum::<f64>()
            + self.bias)
    }

    fn lipschitz(&self, sensor: usize) -> Option<f64> {
        (sensor < self.weights.ncols())
            .then(|| self.weights.column(sensor).iter().map(|a| a * a).sum::<f64>().sqrt())
    }
}

/// How an external detector process is launched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

/// Retries after the first failed attempt before a batch is abandoned.
pub const EXTERNAL_RETRIES: usize = 2;

struct ExternalProcess {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ExternalProcess {
    fn spawn(cmd: &ExternalCommand) -> Result<(Self, HelloResponse)> {
        let mut child = Command::new(&cmd.program)
            .args(&cmd.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| RcaError::External(format!("cannot start '{}': {e}", cmd.program)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut proc = Self {
            child,
            stdin,
            stdout,
        };
        let hello: HelloResponse = proc.roundtrip(&serde_json::json!({"type": "hello"}))?;
        Ok((proc, hello))
    }

    fn roundtrip<T: for<'de> Deserialize<'de>>(&mut self, request: &serde_json::Value) -> Result<T> {
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| RcaError::External(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| RcaError::External(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(RcaError::External("detector closed its output".into()));
        }
        serde_json::from_str(&reply)
            .map_err(|e| RcaError::External(format!("bad reply '{}': {e}", reply.trim_end())))
    }
}

impl Drop for ExternalProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, Deserialize)]
struct HelloResponse {
    name: String,
    version: String,
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// Detector served by a subprocess speaking line-delimited JSON.
///
/// One batch is in flight at a time. A failed exchange restarts the process
/// and is retried [`EXTERNAL_RETRIES`] times before the error propagates.
pub struct ExternalDetector {
    command: ExternalCommand,
    w: usize,
    d: usize,
    name: String,
    version: String,
    process: Mutex<Option<ExternalProcess>>,
}

impl std::fmt::Debug for ExternalDetector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalDetector")
            .field("command", &self.command)
            .field("w", &self.w)
            .field("d", &self.d)
            .field("name", &self.name)
            .field("version", &self.version)
            .finish()
    }
}

impl ExternalDetector {
    pub fn start(command: ExternalCommand, w: usize, d: usize) -> Result<Self> {
        let (proc, hello) = ExternalProcess::spawn(&command)?;
        Ok(Self {
            command,
            w,
            d,
            name: hello.name,
            version: hello.version,
            process: Mutex::new(Some(proc)),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn command(&self) -> &ExternalCommand {
        &self.command
    }

    fn request(&self, windows: &[Array2<f64>]) -> Result<Vec<f64>> {
        let payload: Vec<Vec<f64>> = windows.iter().map(|w| flatten(w.view())).collect();
        let request = serde_json::json!({
            "type": "score",
            "w": self.w,
            "d": self.d,
            "windows": payload,
        });
        let mut guard = self.process.lock().unwrap_or_else(|p| p.into_inner());
        let mut last_err = None;
        for _ in 0..=EXTERNAL_RETRIES {
            if guard.is_none() {
                match ExternalProcess::spawn(&self.command) {
                    Ok((proc, _)) => *guard = Some(proc),
                    Err(e) => {
                        last_err = Some(e);
                        continue;
                    }
                }
            }
            let proc = guard.as_mut().expect("spawned above");
            match proc.roundtrip::<ScoreResponse>(&request) {
                Ok(resp) if resp.scores.len() == windows.len() => return Ok(resp.scores),
                Ok(resp) => {
                    last_err = Some(RcaError::External(format!(
                        "expected {} scores, received {}",
                        windows.len(),
                        resp.scores.len()
                    )));
                }
                Err(e) => last_err = Some(e),
            }
            *guard = None;
        }
        Err(RcaError::External(format!(
            "giving up after {} attempts: {}",
            EXTERNAL_RETRIES + 1,
            last_err.map_or_else(String::new, |e| e.to_string())
        )))
    }
}

impl Scorer for ExternalDetector {
    fn window_shape(&self) -> (usize, usize) {
        (self.w, self.d)
    }

    fn score(&self, window: ArrayView2<'_, f64>) -> Result<f64> {
        self.check_shape(window)?;
        Ok(self.request(&[window.to_owned()])?[0])
    }

    fn score_batch(&self, windows: &[Array2<f64>]) -> Result<Vec<f64>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        for w in windows {
            self.check_shape(w.view())?;
        }
        self.request(windows)
    }
}

/// Where a detector's parameters came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub n_windows: usize,
    pub first_start: Option<usize>,
    pub last_start: Option<usize>,
    pub seed: Option<u64>,
}

impl Provenance {
    fn of(windows: &[Window], seed: Option<u64>) -> Self {
        Self {
            n_windows: windows.len(),
            first_start: windows.iter().map(|w| w.start).min(),
            last_start: windows.iter().map(|w| w.start).max(),
            seed,
        }
    }
}

#[derive(Debug)]
pub enum DetectorModel {
    PcaRecon(PcaDetector),
    DenseAe(AeDetector),
    Linear(LinearDetector),
    External(ExternalDetector),
}

#[derive(Debug)]
pub struct Detector {
    pub model: DetectorModel,
    pub provenance: Provenance,
}

impl Detector {
    pub fn new(model: DetectorModel) -> Self {
        Self {
            model,
            provenance: Provenance::default(),
        }
    }

    fn inner(&self) -> &dyn Scorer {
        match &self.model {
            DetectorModel::PcaRecon(d) => d,
            DetectorModel::DenseAe(d) => d,
            DetectorModel::Linear(d) => d,
            DetectorModel::External(d) => d,
        }
    }

    pub fn kind(&self) -> &'static str {
        match &self.model {
            DetectorModel::PcaRecon(_) => "pca",
            DetectorModel::DenseAe(_) => "ae",
            DetectorModel::Linear(_) => "linear",
            DetectorModel::External(_) => "external",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let stored = match &self.model {
            DetectorModel::PcaRecon(p) => StoredModel::Pca(p.clone()),
            DetectorModel::DenseAe(a) => StoredModel::Ae {
                w: a.w,
                d: a.d,
                net: serde_json::from_str(&a.net.to_json()?)?,
            },
            DetectorModel::Linear(l) => StoredModel::Linear(l.clone()),
            DetectorModel::External(e) => StoredModel::External {
                w: e.w,
                d: e.d,
                command: e.command.clone(),
            },
        };
        Ok(serde_json::to_string(&StoredDetector {
            magic: DETECTOR_MAGIC.into(),
            version: 1,
            provenance: self.provenance.clone(),
            model: stored,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: StoredDetector = serde_json::from_str(text)?;
        if stored.magic != DETECTOR_MAGIC || stored.version != 1 {
            return Err(RcaError::Format(format!(
                "not a detector file ({} v{})",
                stored.magic, stored.version
            )));
        }
        let model = match stored.model {
            StoredModel::Pca(p) => DetectorModel::PcaRecon(p),
            StoredModel::Ae { w, d, net } => DetectorModel::DenseAe(AeDetector {
                w,
                d,
                net: DenseNet::from_json(&net.to_string())?,
            }),
            StoredModel::Linear(l) => DetectorModel::Linear(l),
            StoredModel::External { w, d, command } => {
                DetectorModel::External(ExternalDetector::start(command, w, d)?)
            }
        };
        Ok(Self {
            model,
            provenance: stored.provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RcaError::io(path, e))?;
        Self::from_json(&text)
    }
}

const DETECTOR_MAGIC: &str = "rca-detector";

#[derive(Serialize, Deserialize)]
struct StoredDetector {
    magic: String,
    version: u32,
    provenance: Provenance,
    model: StoredModel,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum StoredModel {
    Pca(PcaDetector),
    Ae {
        w: usize,
        d: usize,
        net: serde_json::Value,
    },
    Linear(LinearDetector),
    External {
        w: usize,
        d: usize,
        command: ExternalCommand,
    },
}

impl Scorer for Detector {
    fn window_shape(&self) -> (usize, usize) {
        self.inner().window_shape()
    }

    fn score(&self, window: ArrayView2<'_, f64>) -> Result<f64> {
        self.inner().score(window)
    }

    fn score_batch(&self, windows: &[Array2<f64>]) -> Result<Vec<f64>> {
        self.inner().score_batch(windows)
    }

    fn lipschitz(&self, sensor: usize) -> Option<f64> {
        self.inner().lipschitz(sensor)
    }
}

/// Reconstruction detector on the top `k_pca` principal directions of the
/// flattened normal windows.
pub fn train_pca_detector(normal_windows: &[Window], k_pca: usize) -> Result<Detector> {
    let x = stack_windows(normal_windows)?;
    let (w, d) = normal_windows[0].data.dim();
    let subspace = PrincipalSubspace::fit(x.view(), k_pca)?;
    Ok(Detector {
        model: DetectorModel::PcaRecon(PcaDetector { w, d, subspace }),
        provenance: Provenance::of(normal_windows, None),
    })
}

/// Hidden layer layout of the autoencoder detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeArchitecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for AeArchitecture {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32, 64],
            activation: Activation::Tanh,
        }
    }
}

/// Train a dense autoencoder to reconstruct flattened normal windows.
pub fn train_ae_detector(
    normal_windows: &[Window],
    architecture: &AeArchitecture,
    config: &TrainConfig,
) -> Result<Detector> {
    let x = stack_windows(normal_windows)?;
    let (w, d) = normal_windows[0].data.dim();
    let mut sizes = vec![w * d];
    sizes.extend(&architecture.hidden);
    sizes.push(w * d);
    let mut net = DenseNet::init(&sizes, architecture.activation, Activation::Linear, config.seed)?;
    nn::train(&mut net, x.view(), x.view(), &SquaredError, config)?;
    Ok(Detector {
        model: DetectorModel::DenseAe(AeDetector { w, d, net }),
        provenance: Provenance::of(normal_windows, Some(config.seed)),
    })
}

/// Empirical `q`-quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(RcaError::Empty("no scores for quantile".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(RcaError::InvalidParameter(format!("quantile {q} not in [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Threshold at the `q`-quantile of held-out normal scores.
pub fn choose_threshold(normal_scores: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(RcaError::InvalidParameter(format!("threshold quantile {q} not in (0, 1)")));
    }
    quantile(normal_scores, q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub flags: Vec<bool>,
}

impl DetectionResult {
    pub fn new(scores: Vec<f64>, threshold: f64) -> Self {
        let flags = scores.iter().map(|&s| s > threshold).collect();
        Self {
            scores,
            threshold,
            flags,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the labels contain a single class.
    pub roc_auc: Option<f64>,
}

/// Window-level precision, recall and F1 of `flags`, plus rank-based
/// ROC-AUC of `scores` (ties count one half).
pub fn detection_metrics(scores: &[f64], flags: &[bool], labels: &[bool]) -> Result<DetectionMetrics> {
    if scores.len() != labels.len() || flags.len() != labels.len() {
        return Err(RcaError::DimensionMismatch {
            what: "detection labels",
            expected: labels.len(),
            found: scores.len().min(flags.len()),
        });
    }
    let tp = flags.iter().zip(labels).filter(|&(&f, &l)| f && l).count() as f64;
    let fp = flags.iter().zip(labels).filter(|&(&f, &l)| f && !l).count() as f64;
    let fn_ = flags.iter().zip(labels).filter(|&(&f, &l)| !f && l).count() as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(DetectionMetrics {
        precision,
        recall,
        f1,
        roc_auc: roc_auc(scores, labels),
    })
}

/// Mann-Whitney form of the ROC-AUC with mid-ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sliding_windows, SeriesMatrix};
    use crate::nn::OptimizerKind;
    use crate::synth::{generate, LatentFactorSystem};
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn windows(len: usize, w: usize, seed: u64) -> Vec<Window> {
        let sys = LatentFactorSystem::grouped(3, 1, 0.8, 0.3, seed).unwrap();
        sliding_windows(&generate(&sys, len).unwrap(), w, 1).unwrap()
    }

    fn score(det: &dyn Scorer, w: &Window) -> f64 {
        det.score(w.data.view()).unwrap()
    }

    #[test]
    fn full_basis_pca_has_zero_residual() {
        let ws = windows(80, 4, 1);
        let det = train_pca_detector(&ws, 12).unwrap();
        for w in &ws {
            assert!(score(&det, w) < 1e-18 * 1e10);
        }
    }

    #[test]
    fn rank_one_data_is_reconstructed() {
        let base = array![1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
        let ws: Vec<Window> = (0..20)
            .map(|i| Window {
                start: i,
                data: (&base * (i as f64 * 0.37 - 2.0)).into_shape_with_order((3, 2)).unwrap(),
            })
            .collect();
        let det = train_pca_detector(&ws, 1).unwrap();
        assert!(ws.iter().all(|w| score(&det, w) < 1e-10));
    }

    #[test]
    fn pca_needs_enough_windows() {
        let ws = windows(12, 4, 2);
        assert!(matches!(train_pca_detector(&ws, 10), Err(RcaError::Degenerate(_))));
        assert!(matches!(train_pca_detector(&[], 1), Err(RcaError::Empty(_))));
    }

    #[test]
    fn pca_score_ignores_in_subspace_components() {
        let ws = windows(300, 5, 3);
        let det = train_pca_detector(&ws, 4).unwrap();
        let DetectorModel::PcaRecon(p) = &det.model else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for w in ws.iter().step_by(37) {
            let coef: Array1<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let shift = p.subspace.components.t().dot(&coef).into_shape_with_order((5, 3)).unwrap();
            let moved = &w.data + &shift;
            let a = score(&det, w);
            let b = det.score(moved.view()).unwrap();
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn scores_are_pure_and_batched_consistently() {
        let ws = windows(120, 6, 4);
        let det = train_pca_detector(&ws, 5).unwrap();
        let datas: Vec<Array2<f64>> = ws.iter().map(|w| w.data.clone()).collect();
        let batch = det.score_batch(&datas).unwrap();
        for (w, b) in ws.iter().zip(&batch) {
            assert_eq!(score(&det, w).to_bits(), b.to_bits());
        }
        assert!(det.score(Array2::zeros((6, 2)).view()).is_err());
    }

    #[test]
    fn identity_capable_autoencoder() {
        let ws = windows(150, 2, 5);
        let arch = AeArchitecture {
            hidden: vec![6],
            activation: Activation::Linear,
        };
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 300,
            batch_size: 16,
            seed: 1,
            optimizer: OptimizerKind::adam(),
        };
        let det = train_ae_detector(&ws, &arch, &cfg).unwrap();
        let mean = ws.iter().map(|w| score(&det, w)).sum::<f64>() / ws.len() as f64;
        assert!(mean < 1e-4, "mean training score {mean}");
        let again = train_ae_detector(&ws, &arch, &cfg).unwrap();
        let (DetectorModel::DenseAe(a), DetectorModel::DenseAe(b)) = (&det.model, &again.model) else {
            unreachable!()
        };
        assert_eq!(a, b);
        let datas: Vec<Array2<f64>> = ws.iter().take(10).map(|w| w.data.clone()).collect();
        let batch = det.score_batch(&datas).unwrap();
        for (w, b) in ws.iter().zip(batch) {
            assert!((score(&det, w) - b).abs() < 1e-12);
        }
    }

    #[test]
    fn detector_json_roundtrip() {
        let ws = windows(60, 3, 6);
        let det = train_pca_detector(&ws, 3).unwrap();
        let back = Detector::from_json(&det.to_json().unwrap()).unwrap();
        for w in &ws {
            assert_eq!(score(&det, w).to_bits(), score(&back, w).to_bits());
        }
        assert_eq!(back.provenance, det.provenance);
    }

    #[test]
    fn linear_detector_lipschitz() {
        let det = LinearDetector {
            weights: array![[3.0, 0.0], [4.0, 1.0]],
            bias: 0.0,
        };
        assert_eq!(det.lipschitz(0), Some(5.0));
        assert_eq!(det.lipschitz(1), Some(1.0));
        assert_eq!(det.lipschitz(2), None);
        let s = SeriesMatrix::from_values(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(det.score(s.values()).unwrap(), 3.0 + 12.0 + 4.0);
    }

    #[test]
    fn thresholds() {
        assert_eq!(choose_threshold(&[2.5; 7], 0.9).unwrap(), 2.5);
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((choose_threshold(&scores, 0.95).unwrap() - 95.05).abs() < 1e-12);
        assert!(choose_threshold(&[], 0.5).is_err());
        assert!(choose_threshold(&scores, 1.0).is_err());
        for q in [0.5, 0.9, 0.99] {
            let t = choose_threshold(&scores, q).unwrap();
            let flagged = DetectionResult::new(scores.clone(), t).flags.iter().filter(|&&f| f).count();
            assert!(flagged as f64 <= (1.0 - q) * 100.0 + 1.0);
        }
    }

    #[test]
    fn perfect_detection() {
        let labels = [false, false, true, true];
        let scores = [0.1, 0.2, 0.8, 0.9];
        let m = detection_metrics(&scores, &labels, &labels).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        assert_eq!(m.roc_auc, Some(1.0));
        let single = detection_metrics(&scores, &[true; 4], &[true; 4]).unwrap();
        assert_eq!(single.roc_auc, None);
    }

    #[test]
    fn auc_ties_count_half() {
        assert_eq!(roc_auc(&[1.0, 1.0], &[true, false]), Some(0.5));
        assert_eq!(roc_auc(&[0.0, 1.0, 1.0], &[false, true, false]), Some(0.75));
    }

    #[test]
    fn random_scores_have_chance_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.02, "{auc}");
    }

    #[test]
    fn f1_is_harmonic_mean() {
        let labels = [true, true, false, false, true, false];
        let flags = [true, false, true, false, true, true];
        let m = detection_metrics(&[0.0; 6], &flags, &labels).unwrap();
        let hm = 2.0 * m.precision * m.recall / (m.precision + m.recall);
        assert!((m.f1 - hm).abs() < 1e-12);
    }
}
