//! Window embeddings `g: R^{w x d} -> R^k` used for neighbor retrieval.
//!
//! Masked contexts go through the same map as full windows. The imported
//! variant is a lookup table keyed by window start index.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, MaskedContext, Window};
use crate::detector::stack_flat;
use crate::error::{RcaError, Result};
use crate::nn::{epoch_batches, Activation, DenseNet, Optimizer, TrainConfig, TrainReport};
use crate::pca::PrincipalSubspace;

pub const DEFAULT_PCA_DIM: usize = 8;
pub const DEFAULT_LATENT_DIM: usize = 8;

/// PCA coordinates of flattened windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaEmbedding {
    pub w: usize,
    pub d: usize,
    pub subspace: PrincipalSubspace,
}

/// Loss weights of the VAE objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeWeights {
    pub rec: f64,
    pub kl: f64,
    pub time: f64,
}

impl Default for VaeWeights {
    fn default() -> Self {
        Self {
            rec: 3.0,
            kl: 1.0,
            time: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeArchitecture {
    /// Encoder hidden sizes; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
}

impl Default for VaeArchitecture {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            latent_dim: DEFAULT_LATENT_DIM,
            activation: Activation::Tanh,
        }
    }
}

/// Variational autoencoder. The encoder emits `[mu, log sigma^2]`; the
/// embedding is the posterior mean.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeEmbedding {
    pub w: usize,
    pub d: usize,
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    pub weights: VaeWeights,
}

/// KL divergence of `N(mu, sigma^2)` from the standard normal, summed over
/// coordinates.
pub fn gaussian_kl(mu: ArrayView1<'_, f64>, log_var: ArrayView1<'_, f64>) -> f64 {
    -0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(&m, &lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

struct VaePass {
    enc: crate::nn::ForwardCache,
    dec: crate::nn::ForwardCache,
    mu: Array2<f64>,
    log_var: Array2<f64>,
}

impl VaeEmbedding {
    pub fn init(w: usize, d: usize, arch: &VaeArchitecture, weights: VaeWeights, seed: u64) -> Result<Self> {
        if arch.latent_dim == 0 {
            return Err(RcaError::InvalidParameter("latent dimension must be positive".into()));
        }
        let mut enc_sizes = vec![w * d];
        enc_sizes.extend(&arch.hidden);
        enc_sizes.push(2 * arch.latent_dim);
        let mut dec_sizes = vec![arch.latent_dim];
        dec_sizes.extend(arch.hidden.iter().rev());
        dec_sizes.push(w * d);
        Ok(Self {
            w,
            d,
            encoder: DenseNet::init(&enc_sizes, arch.activation, Activation::Linear, seed)?,
            decoder: DenseNet::init(
                &dec_sizes,
                arch.activation,
                Activation::Linear,
                seed ^ 0xdec0_de00,
            )?,
            weights,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.decoder.n_params()
    }

    /// Encoder parameters followed by decoder parameters.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.encoder.params_flat();
        p.extend(self.decoder.params_flat());
        p
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(RcaError::DimensionMismatch {
                what: "vae parameters",
                expected: self.n_params(),
                found: params.len(),
            });
        }
        let split = self.encoder.n_params();
        self.encoder.set_params_flat(&params[..split])?;
        self.decoder.set_params_flat(&params[split..])
    }

    /// Posterior mean and log-variance of one flattened window.
    pub fn posterior(&self, x: &[f64]) -> Result<(Array1<f64>, Array1<f64>)> {
        let (out, _) = self.encoder.forward(x)?;
        let l = self.latent_dim();
        Ok((out.slice(s![..l]).to_owned(), out.slice(s![l..]).to_owned()))
    }

    fn pass(&self, x: ArrayView2<'_, f64>, noise: ArrayView2<'_, f64>) -> Result<VaePass> {
        let l = self.latent_dim();
        if noise.dim() != (x.nrows(), l) {
            return Err(RcaError::DimensionMismatch {
                what: "reparameterization noise",
                expected: x.nrows() * l,
                found: noise.len(),
            });
        }
        let enc = self.encoder.forward_batch(x)?;
        let mu = enc.outputs().slice(s![.., ..l]).to_owned();
        let log_var = enc.outputs().slice(s![.., l..]).to_owned();
        let z = &mu + &(log_var.mapv(|v| (0.5 * v).exp()) * &noise);
        let dec = self.decoder.forward_batch(z.view())?;
        Ok(VaePass {
            enc,
            dec,
            mu,
            log_var,
        })
    }

    fn breakdown(&self, x: ArrayView2<'_, f64>, p: &VaePass) -> Result<VaeLossBreakdown> {
        let recon = p.dec.outputs();
        let rec: f64 = x.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum();
        let kl: f64 = p
            .mu
            .outer_iter()
            .zip(p.log_var.outer_iter())
            .map(|(m, lv)| gaussian_kl(m, lv))
            .sum();
        let time: f64 = self
            .time_gaps(x, recon.view())
            .iter()
            .map(|g| g * g)
            .sum();
        let total = self.weights.rec * rec + self.weights.kl * kl + self.weights.time * time;
        if !total.is_finite() {
            return Err(RcaError::Degenerate(format!(
                "non-finite vae loss (rec {rec}, kl {kl}, time {time})"
            )));
        }
        Ok(VaeLossBreakdown {
            total,
            rec,
            kl,
            time,
        })
    }

    /// Per-sample, per-timestep gap between the sensor means of input and
    /// reconstruction, shaped `(n, w)`.
    fn time_gaps(&self, x: ArrayView2<'_, f64>, recon: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = x.nrows();
        let diff = &x - &recon;
        diff.into_shape_with_order((n, self.w, self.d))
            .expect("flattened windows")
            .mean_axis(Axis(2))
            .expect("d > 0")
    }

    /// Loss summed over the rows of `x` with explicit reparameterization
    /// noise, and its gradient with respect to [`Self::params_flat`].
    pub fn loss_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        noise: ArrayView2<'_, f64>,
    ) -> Result<(VaeLossBreakdown, Vec<f64>)> {
        let p = self.pass(x, noise)?;
        let loss = self.breakdown(x, &p)?;
        let VaeWeights { rec, kl, time } = self.weights;
        let recon = p.dec.outputs();

        let mut g_recon = (recon - &x) * (2.0 * rec);
        let gaps = self.time_gaps(x, recon.view());
        let inv_d = 1.0 / self.d as f64;
        for (mut row, gap) in g_recon.outer_iter_mut().zip(gaps.outer_iter()) {
            for (t, &m) in gap.iter().enumerate() {
                row.slice_mut(s![t * self.d..(t + 1) * self.d])
                    .mapv_inplace(|g| g - 2.0 * time * m * inv_d);
            }
        }
        let (dec_grads, g_z) = self.decoder.backward(&p.dec, g_recon.view())?;

        let l = self.latent_dim();
        let mut g_enc = Array2::zeros((x.nrows(), 2 * l));
        ndarray::Zip::from(g_enc.slice_mut(s![.., ..l]))
            .and(&g_z)
            .and(&p.mu)
            .for_each(|g, &gz, &m| *g = gz + kl * m);
        ndarray::Zip::from(g_enc.slice_mut(s![.., l..]))
            .and(&g_z)
            .and(&p.log_var)
            .and(&noise)
            .for_each(|g, &gz, &lv, &e| {
                *g = gz * e * 0.5 * (0.5 * lv).exp() - 0.5 * kl * (1.0 - lv.exp());
            });
        let (enc_grads, _) = self.encoder.backward(&p.enc, g_enc.view())?;

        let mut grad = enc_grads.flatten();
        grad.extend(dec_grads.flatten());
        Ok((loss, grad))
    }

    /// Loss of one batch with fixed noise, no gradient.
    pub fn loss_with_noise(&self, x: ArrayView2<'_, f64>, noise: ArrayView2<'_, f64>) -> Result<VaeLossBreakdown> {
        let p = self.pass(x, noise)?;
        self.breakdown(x, &p)
    }
}

/// Loss of a single window, decoding the posterior mean.
pub fn vae_loss(vae: &VaeEmbedding, window: &Window) -> Result<VaeLossBreakdown> {
    check_shape(window.data.view(), vae.w, vae.d)?;
    let x = Array2::from_shape_vec((1, vae.w * vae.d), window.flatten()).expect("shape checked");
    vae.loss_with_noise(x.view(), Array2::zeros((1, vae.latent_dim())).view())
}

/// Vectors keyed by window start and, optionally, the masked sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportedEmbedding {
    dim: usize,
    table: BTreeMap<(usize, Option<usize>), Vec<f64>>,
}

impl ImportedEmbedding {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, window_id: usize, masked: Option<usize>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(RcaError::DimensionMismatch {
                what: "embedding vector",
                expected: self.dim,
                found: vector.len(),
            });
        }
        if self.table.insert((window_id, masked), vector).is_some() {
            return Err(RcaError::Format(format!(
                "duplicate window_id {window_id}{}",
                masked.map_or(String::new(), |j| format!(" (masked sensor {j})"))
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Masked lookups fall back to the unmasked row when the table has no
    /// sensor-specific entry.
    pub fn lookup(&self, window_id: usize, masked: Option<usize>) -> Result<Array1<f64>> {
        masked
            .and_then(|j| self.table.get(&(window_id, Some(j))))
            .or_else(|| self.table.get(&(window_id, None)))
            .map(|v| Array1::from(v.clone()))
            .ok_or(RcaError::UnknownWindow { window_id, masked })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    Pca(PcaEmbedding),
    Vae(VaeEmbedding),
    Imported(ImportedEmbedding),
}

fn check_shape(x: ArrayView2<'_, f64>, w: usize, d: usize) -> Result<()> {
    if x.dim() != (w, d) {
        return Err(RcaError::DimensionMismatch {
            what: "window shape",
            expected: w * d,
            found: x.len(),
        });
    }
    Ok(())
}

impl Embedding {
    pub fn dim(&self) -> usize {
        match self {
            Embedding::Pca(p) => p.subspace.n_components(),
            Embedding::Vae(v) => v.latent_dim(),
            Embedding::Imported(t) => t.dim,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Embedding::Pca(_) => "pca",
            Embedding::Vae(_) => "vae",
            Embedding::Imported(_) => "imported",
        }
    }

    /// Embed raw window contents. Not available for lookup tables.
    pub fn embed_array(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        match self {
            Embedding::Pca(p) => {
                check_shape(x, p.w, p.d)?;
                let flat: Array1<f64> = x.iter().copied().collect();
                p.subspace.check_dim(flat.len())?;
                Ok(p.subspace.project(flat.view()))
            }
            Embedding::Vae(v) => {
                check_shape(x, v.w, v.d)?;
                let flat: Vec<f64> = x.iter().copied().collect();
                Ok(v.posterior(&flat)?.0)
            }
            Embedding::Imported(_) => Err(RcaError::InvalidParameter(
                "imported embeddings are looked up by window id".into(),
            )),
        }
    }

    pub fn embed_window(&self, window: &Window) -> Result<Array1<f64>> {
        match self {
            Embedding::Imported(t) => t.lookup(window.start, None),
            _ => self.embed_array(window.data.view()),
        }
    }

    pub fn embed_context(&self, context: &MaskedContext) -> Result<Array1<f64>> {
        match self {
            Embedding::Imported(t) => t.lookup(context.base.start, Some(context.masked_sensor)),
            _ => self.embed_array(context.representation.view()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let stored = match self {
            Embedding::Pca(p) => StoredEmbedding::Pca(p.clone()),
            Embedding::Vae(v) => StoredEmbedding::Vae {
                w: v.w,
                d: v.d,
                weights: v.weights,
                encoder: serde_json::from_str(&v.encoder.to_json()?)?,
                decoder: serde_json::from_str(&v.decoder.to_json()?)?,
            },
            Embedding::Imported(t) => StoredEmbedding::Imported {
                dim: t.dim,
                rows: t
                    .table
                    .iter()
                    .map(|(&(id, masked), v)| (id, masked, v.clone()))
                    .collect(),
            },
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(match serde_json::from_str(text)? {
            StoredEmbedding::Pca(p) => Embedding::Pca(p),
            StoredEmbedding::Vae {
                w,
                d,
                weights,
                encoder,
                decoder,
            } => Embedding::Vae(VaeEmbedding {
                w,
                d,
                weights,
                encoder: DenseNet::from_json(&encoder.to_string())?,
                decoder: DenseNet::from_json(&decoder.to_string())?,
            }),
            StoredEmbedding::Imported { dim, rows } => {
                let mut t = ImportedEmbedding::new(dim);
                for (id, masked, v) in rows {
                    t.insert(id, masked, v)?;
                }
                Embedding::Imported(t)
            }
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

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum StoredEmbedding {
    Pca(PcaEmbedding),
    Vae {
        w: usize,
        d: usize,
        weights: VaeWeights,
        encoder: serde_json::Value,
        decoder: serde_json::Value,
    },
    Imported {
        dim: usize,
        rows: Vec<(usize, Option<usize>, Vec<f64>)>,
    },
}

pub fn fit_pca_embedding(normal_windows: &[Window], k: usize) -> Result<Embedding> {
    let x = stack_flat(normal_windows)?;
    let (w, d) = normal_windows[0].data.dim();
    Ok(Embedding::Pca(PcaEmbedding {
        w,
        d,
        subspace: PrincipalSubspace::fit(x.view(), k)?,
    }))
}

/// Minibatch training with one reparameterization draw per window per
/// epoch. Steps use the batch-mean loss; the report holds epoch-mean totals.
pub fn train_vae(
    normal_windows: &[Window],
    architecture: &VaeArchitecture,
    weights: VaeWeights,
    config: &TrainConfig,
) -> Result<(Embedding, TrainReport)> {
    config.validate()?;
    let x = stack_flat(normal_windows)?;
    let (w, d) = normal_windows[0].data.dim();
    let mut vae = VaeEmbedding::init(w, d, architecture, weights, config.seed)?;
    let n = x.nrows();
    let l = vae.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11_0e75);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, vae.n_params());
    let mut params = vae.params_flat();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for (b, batch) in epoch_batches(n, config.batch_size, &mut rng).iter().enumerate() {
            let xb = x.select(Axis(0), batch);
            let noise = Array2::from_shape_simple_fn((batch.len(), l), || {
                StandardNormal.sample(&mut noise_rng)
            });
            let (loss, mut grad) = vae.loss_and_grad(xb.view(), noise.view()).map_err(|e| {
                RcaError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: e.to_string(),
                }
            })?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(RcaError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: "non-finite gradient".into(),
                });
            }
            total += loss.total;
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut params, &grad);
            vae.set_params_flat(&params)?;
        }
        history.push(total / n as f64);
    }
    Ok((
        Embedding::Vae(vae),
        TrainReport {
            loss_history: history,
        },
    ))
}

/// Write `window_id[,masked_sensor],e0..e{k-1}` rows. With `masked_sensors`
/// set, each window also gets one row per masked variant.
pub fn write_embeddings<W: Write>(
    embedding: &Embedding,
    windows: &[Window],
    masked_sensors: bool,
    writer: W,
) -> Result<()> {
    let k = embedding.dim();
    let mut wtr = csv::Writer::from_writer(writer);
    let map_err = |e: csv::Error| RcaError::Csv {
        line: 0,
        message: e.to_string(),
    };
    let mut header = vec!["window_id".to_string()];
    if masked_sensors {
        header.push("masked_sensor".into());
    }
    header.extend((0..k).map(|i| format!("e{i}")));
    wtr.write_record(&header).map_err(map_err)?;
    let mut emit = |id: usize, masked: Option<usize>, v: Array1<f64>| -> Result<()> {
        let mut rec = vec![id.to_string()];
        if masked_sensors {
            rec.push(masked.map_or(String::new(), |j| j.to_string()));
        }
        rec.extend(v.iter().map(|x| format!("{x:?}")));
        wtr.write_record(&rec).map_err(map_err)
    };
    for win in windows {
        emit(win.start, None, embedding.embed_window(win)?)?;
        if masked_sensors {
            for j in 0..win.n_sensors() {
                let ctx = crate::data::mask_sensor(win, j)?;
                emit(win.start, Some(j), embedding.embed_context(&ctx)?)?;
            }
        }
    }
    wtr.flush().map_err(|e| RcaError::Csv {
        line: 0,
        message: e.to_string(),
    })
}

pub fn export_embeddings(
    embedding: &Embedding,
    windows: &[Window],
    masked_sensors: bool,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut buf = Vec::new();
    write_embeddings(embedding, windows, masked_sensors, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn read_embeddings<R: Read>(reader: R) -> Result<Embedding> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| RcaError::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.get(0) != Some("window_id") {
        return Err(RcaError::Csv {
            line: 1,
            message: "first column must be window_id".into(),
        });
    }
    let has_mask = header.get(1) == Some("masked_sensor");
    let skip = 1 + usize::from(has_mask);
    let k = header.len().saturating_sub(skip);
    if k == 0 {
        return Err(RcaError::Csv {
            line: 1,
            message: "no embedding columns".into(),
        });
    }
    let mut table = ImportedEmbedding::new(k);
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| RcaError::Csv {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(RcaError::Csv {
                line,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let bad = |what: &str, v: &str| RcaError::Csv {
            line,
            message: format!("invalid {what} '{v}'"),
        };
        let id: usize = rec[0].parse().map_err(|_| bad("window_id", &rec[0]))?;
        let masked = if has_mask && !rec[1].is_empty() {
            Some(rec[1].parse().map_err(|_| bad("masked_sensor", &rec[1]))?)
        } else {
            None
        };
        let vector = rec
            .iter()
            .skip(skip)
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| bad("value", v)))
            .collect::<Result<Vec<f64>>>()?;
        table.insert(id, masked, vector).map_err(|e| RcaError::Csv {
            line,
            message: e.to_string(),
        })?;
    }
    Ok(Embedding::Imported(table))
}

pub fn import_embeddings(path: impl AsRef<Path>) -> Result<Embedding> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| RcaError::io(path, e))?;
    read_embeddings(file)
}
