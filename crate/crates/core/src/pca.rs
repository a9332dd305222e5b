//! Principal subspace of flattened windows, shared by the reconstruction
//! detector and the PCA embedding.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{RcaError, Result};

/// Top-`k` eigenvectors of the sample covariance, stored as orthonormal rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalSubspace {
    pub mean: Array1<f64>,
    /// `k x D`, rows sorted by decreasing explained variance.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
}

impl PrincipalSubspace {
    /// Fit on the rows of `samples` (`n x D`).
    pub fn fit(samples: ArrayView2<'_, f64>, k: usize) -> Result<Self> {
        let (n, dim) = samples.dim();
        if n == 0 {
            return Err(RcaError::Empty("no samples for principal subspace".into()));
        }
        if k == 0 || k > dim {
            return Err(RcaError::InvalidParameter(format!(
                "component count {k} not in 1..={dim}"
            )));
        }
        if k > n {
            return Err(RcaError::Degenerate(format!(
                "{n} samples cannot determine {k} components"
            )));
        }
        let mean = samples.mean_axis(Axis(0)).expect("n > 0");
        let centered = &samples - &mean;
        let cov = centered.t().dot(&centered) / n as f64;
        let cov = DMatrix::from_fn(dim, dim, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let mut components = Array2::zeros((k, dim));
        let mut explained_variance = Vec::with_capacity(k);
        for (row, &idx) in order.iter().take(k).enumerate() {
            let v = eig.eigenvectors.column(idx);
            // fix the sign so the largest-magnitude coordinate is positive
            let pivot = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map_or(1.0, |(_, x)| x.signum());
            for c in 0..dim {
                components[[row, c]] = pivot * v[c];
            }
            explained_variance.push(eig.eigenvalues[idx].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    /// Coordinates of `x - mean` in the subspace.
    pub fn project(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.components.dot(&(&x - &self.mean))
    }

    /// Squared norm of the component of `x - mean` orthogonal to the subspace.
    pub fn residual_sq(&self, x: ArrayView1<'_, f64>) -> f64 {
        let centered = &x - &self.mean;
        let coords = self.components.dot(&centered);
        let recon = self.components.t().dot(&coords);
        centered
            .iter()
            .zip(recon.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub(crate) fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(RcaError::DimensionMismatch {
                what: "flattened window",
                expected: self.dim(),
                found: len,
            });
        }
        Ok(())
    }
}
