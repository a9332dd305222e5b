//! Dense feed-forward networks with exact reverse-mode gradients, SGD/Adam
//! training, finite-difference gradient checking and JSON persistence.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{RcaError, Result};

pub const MODEL_MAGIC: &str = "rca-densenet";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Affine map followed by an elementwise activation. `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

/// Per-layer inputs and pre-activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    outputs: Array2<f64>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn outputs(&self) -> &Array2<f64> {
        &self.outputs
    }
}

/// Parameter gradients laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl Gradients {
    /// Flattened in the same order as [`DenseNet::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weight.iter().zip(&self.bias) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.weight.iter().all(|w| w.iter().all(|&v| v == 0.0))
            && self.bias.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

impl DenseNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(RcaError::InvalidParameter("network needs a layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(RcaError::DimensionMismatch {
                    what: "layer bias",
                    expected: layer.output_dim(),
                    found: layer.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].output_dim() != layer.input_dim() {
                return Err(RcaError::DimensionMismatch {
                    what: "layer chain",
                    expected: layers[i - 1].output_dim(),
                    found: layer.input_dim(),
                });
            }
            if !layer.weight.iter().chain(layer.bias.iter()).all(|v| v.is_finite()) {
                return Err(RcaError::InvalidParameter(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights, zero biases. `sizes` lists every layer width
    /// including input and output; the last layer uses `output_activation`.
    pub fn init(
        sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(RcaError::InvalidParameter(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-limit..limit));
                DenseLayer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: if i + 1 == n {
                        output_activation
                    } else {
                        hidden_activation
                    },
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Array1<f64>, ForwardCache)> {
        let batch = ArrayView2::from_shape((1, input.len()), input).expect("contiguous slice");
        let cache = self.forward_batch(batch)?;
        Ok((cache.outputs.row(0).to_owned(), cache))
    }

    /// Forward pass over the rows of `inputs`.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(inputs.ncols())?;
        let mut cache_inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = inputs.to_owned();
        for layer in &self.layers {
            let z = current.dot(&layer.weight.t()) + &layer.bias;
            let a = z.mapv(|v| layer.activation.apply(v));
            cache_inputs.push(current);
            pre.push(z);
            current = a;
        }
        Ok(ForwardCache {
            inputs: cache_inputs,
            pre_activations: pre,
            outputs: current,
        })
    }

    /// Forward pass without keeping intermediates.
    pub fn predict_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(inputs.ncols())?;
        let mut current = inputs.to_owned();
        for layer in &self.layers {
            let mut z = current.dot(&layer.weight.t()) + &layer.bias;
            z.mapv_inplace(|v| layer.activation.apply(v));
            current = z;
        }
        Ok(current)
    }

    /// Reverse-mode pass. `output_gradient` holds dL/d(output) per sample;
    /// returns parameter gradients summed over the batch and dL/d(input).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_gradient: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if output_gradient.dim() != cache.outputs.dim() || cache.inputs.len() != self.layers.len() {
            return Err(RcaError::DimensionMismatch {
                what: "output gradient",
                expected: cache.outputs.len(),
                found: output_gradient.len(),
            });
        }
        let n = self.layers.len();
        let mut weight = vec![Array2::zeros((0, 0)); n];
        let mut bias = vec![Array1::zeros(0); n];
        let mut upstream = output_gradient.to_owned();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            // activated output of layer i is the input of layer i + 1
            let activated = cache.inputs.get(i + 1).unwrap_or(&cache.outputs);
            let mut delta = upstream;
            ndarray::Zip::from(&mut delta)
                .and(&cache.pre_activations[i])
                .and(activated)
                .for_each(|g, &z, &a| *g *= layer.activation.derivative(z, a));
            weight[i] = delta.t().dot(&cache.inputs[i]);
            bias[i] = delta.sum_axis(Axis(0));
            upstream = delta.dot(&layer.weight);
        }
        Ok((Gradients { weight, bias }, upstream))
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(RcaError::DimensionMismatch {
                what: "flat parameters",
                expected: self.n_params(),
                found: params.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(RcaError::DimensionMismatch {
                what: "network input",
                expected: self.input_dim(),
                found: len,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            magic: MODEL_MAGIC.to_string(),
            version: MODEL_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    input: l.input_dim(),
                    output: l.output_dim(),
                    activation: l.activation,
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.magic != MODEL_MAGIC || file.version != MODEL_VERSION {
            return Err(RcaError::Format(format!(
                "expected {MODEL_MAGIC} v{MODEL_VERSION}, found {} v{}",
                file.magic, file.version
            )));
        }
        let layers = file
            .layers
            .into_iter()
            .map(|r| {
                let weight = Array2::from_shape_vec((r.output, r.input), r.weight)
                    .map_err(|e| RcaError::Format(e.to_string()))?;
                Ok(DenseLayer {
                    weight,
                    bias: Array1::from(r.bias),
                    activation: r.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
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

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    input: usize,
    output: usize,
    activation: Activation,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    magic: String,
    version: u32,
    layers: Vec<LayerRecord>,
}

/// A loss over a batch of network outputs.
pub trait Objective {
    /// Loss summed over the batch rows and its gradient with respect to
    /// `output`.
    fn loss_and_grad(
        &self,
        output: ArrayView2<'_, f64>,
        target: ArrayView2<'_, f64>,
    ) -> (f64, Array2<f64>);
}

impl<F> Objective for F
where
    F: Fn(ArrayView2<'_, f64>, ArrayView2<'_, f64>) -> (f64, Array2<f64>),
{
    fn loss_and_grad(
        &self,
        output: ArrayView2<'_, f64>,
        target: ArrayView2<'_, f64>,
    ) -> (f64, Array2<f64>) {
        self(output, target)
    }
}

/// Per-sample sum of squared errors.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredError;

impl Objective for SquaredError {
    fn loss_and_grad(
        &self,
        output: ArrayView2<'_, f64>,
        target: ArrayView2<'_, f64>,
    ) -> (f64, Array2<f64>) {
        let diff = &output - &target;
        let loss = diff.iter().map(|d| d * d).sum();
        (loss, diff * 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            optimizer: OptimizerKind::adam(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(RcaError::InvalidParameter(
                "training needs learning_rate >= 0, epochs >= 1, batch_size >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, n_params: usize) -> Self {
        Self {
            kind,
            learning_rate,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.steps += 1;
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    params[i] -= lr * m / (v.sqrt() + eps);
                }
            }
        }
    }
}

/// Seeded minibatch order for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Minibatch training of `net` on `(inputs, targets)` rows. Each step uses
/// the batch-mean loss.
pub fn train(
    net: &mut DenseNet,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    objective: &dyn Objective,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let n = inputs.nrows();
    if n == 0 {
        return Err(RcaError::Empty("training set".into()));
    }
    if targets.nrows() != n || targets.ncols() != net.output_dim() {
        return Err(RcaError::DimensionMismatch {
            what: "training targets",
            expected: n * net.output_dim(),
            found: targets.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, net.n_params());
    let mut params = net.params_flat();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for (b, batch) in epoch_batches(n, config.batch_size, &mut rng).iter().enumerate() {
            let x = inputs.select(Axis(0), batch);
            let y = targets.select(Axis(0), batch);
            let cache = net.forward_batch(x.view())?;
            let (loss, mut grad) = objective.loss_and_grad(cache.outputs.view(), y.view());
            if !loss.is_finite() {
                return Err(RcaError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss} on {} samples", batch.len()),
                });
            }
            total += loss;
            grad /= batch.len() as f64;
            let (grads, _) = net.backward(&cache, grad.view())?;
            opt.step(&mut params, &grads.flatten());
            net.set_params_flat(&params)?;
        }
        history.push(total / n as f64);
    }
    Ok(TrainReport {
        loss_history: history,
    })
}

/// Smallest denominator used when forming relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)` per parameter.
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare `analytic` against central differences of `f` around `params`.
pub fn check_gradients(
    params: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
    h: f64,
    tolerance: f64,
) -> GradCheckReport {
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut probe = params.to_vec();
    let relative_errors: Vec<f64> = (0..params.len())
        .map(|i| {
            probe[i] = params[i] + h;
            let up = f(&probe);
            probe[i] = params[i] - h;
            let down = f(&probe);
            probe[i] = params[i];
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
        })
        .collect();
    let max_relative_error = relative_errors.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        passed: max_relative_error < tolerance && relative_errors.iter().all(|e| e.is_finite()),
        relative_errors,
        max_relative_error,
        tolerance,
    }
}

/// Gradient check of `objective` for one `(input, target)` sample.
pub fn finite_diff_check(
    net: &DenseNet,
    objective: &dyn Objective,
    input: &[f64],
    target: &[f64],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let x = ArrayView2::from_shape((1, input.len()), input)
        .map_err(|e| RcaError::InvalidParameter(e.to_string()))?;
    let y = ArrayView2::from_shape((1, target.len()), target)
        .map_err(|e| RcaError::InvalidParameter(e.to_string()))?;
    let cache = net.forward_batch(x)?;
    let (_, grad) = objective.loss_and_grad(cache.outputs.view(), y);
    let (grads, _) = net.backward(&cache, grad.view())?;
    let params = net.params_flat();
    let mut scratch = net.clone();
    Ok(check_gradients(
        &params,
        &grads.flatten(),
        |p| {
            scratch.set_params_flat(p).expect("same shape");
            let out = scratch.predict_batch(x).expect("checked above");
            objective.loss_and_grad(out.view(), y).0
        },
        h,
        tolerance,
    ))
}
