//! Station-graph post-processing of ensemble weather forecasts.
//!
//! Each forecast day becomes a graph whose nodes are (station, member) pairs.
//! Nearby stations and members of the same station are connected, a stack of
//! multi-head attention blocks refines the node states, and a permutation
//! invariant Deep Set head turns each station's member states into a Gaussian
//! predictive distribution. Training minimises the closed-form CRPS.
//!
//! The crate also carries the verification toolkit used to judge the
//! forecasts: ensemble and Gaussian CRPS, prediction-interval metrics, PIT,
//! CRPSS, Diebold-Mariano tests with Benjamini-Hochberg correction and
//! two-stage permutation feature importance.

pub mod data;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod normal;
pub mod report;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod training;

pub use data::{ForecastDataset, Normalizer, SplitLabel, SplitSpec, Station};
pub use error::{Error, Result};
pub use graph::ForecastGraph;
pub use models::{GaussianPrediction, ModelKind};
