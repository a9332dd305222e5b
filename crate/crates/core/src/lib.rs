//! Conditional counterfactual attribution for root cause analysis of
//! multivariate time-series anomalies.
//!
//! A detector scores `w x d` windows. For an anomalous window and a sensor
//! `j`, normal reference windows are retrieved by similarity of the context
//! that excludes sensor `j`; swapping in their sensor-`j` trajectories and
//! measuring the score drop yields the attribution of `j`.

pub mod attribution;
pub mod data;
pub mod detector;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pca;
pub mod retrieval;
pub mod synth;

pub use error::{RcaError, Result};
