use serde::{Deserialize, Serialize};

use super::{ForecastDataset, SplitSpec};
use crate::error::{Error, Result};

/// Names of the per-station static inputs, in the order they enter the network.
pub const STATIC_FEATURES: [&str; 4] = ["alt", "orog", "lat", "lon"];

/// Standardization of member features (fitted on training days) and of the
/// static station features (fitted over stations). Observations are never
/// touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub feature_names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub static_mean: [f64; 4],
    pub static_std: [f64; 4],
}

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

fn clamp_std(name: &str, mean: f64, std: f64) -> f64 {
    if std > 1e-12 * mean.abs().max(1.0) {
        std
    } else {
        log::warn!("feature `{name}` is constant on the training days; using std = 1");
        1.0
    }
}

impl Normalizer {
    pub fn fit(ds: &ForecastDataset, split: &SplitSpec) -> Result<Self> {
        if split.train.is_empty() || split.train.end > ds.n_days() {
            return Err(Error::Config(format!(
                "training range {:?} is empty or outside {} days",
                split.train,
                ds.n_days()
            )));
        }
        let (_, ns, nm, np) = ds.shape();
        let mut mean = Vec::with_capacity(np);
        let mut std = Vec::with_capacity(np);
        for p in 0..np {
            let col = split
                .train
                .clone()
                .flat_map(move |t| (0..ns).flat_map(move |s| (0..nm).map(move |n| (t, s, n))))
                .map(|(t, s, n)| ds.feature(t, s, n, p));
            let (m, sd) = moments(col);
            mean.push(m);
            std.push(clamp_std(&ds.feature_names()[p], m, sd));
        }
        let mut static_mean = [0.0; 4];
        let mut static_std = [1.0; 4];
        for k in 0..4 {
            let (m, sd) = moments(ds.stations().iter().map(|st| st.static_features()[k]));
            static_mean[k] = m;
            static_std[k] = clamp_std(STATIC_FEATURES[k], m, sd);
        }
        Ok(Self { feature_names: ds.feature_names().to_vec(), mean, std, static_mean, static_std })
    }

    pub fn normalize(&self, p: usize, x: f64) -> f64 {
        (x - self.mean[p]) / self.std[p]
    }

    pub fn denormalize(&self, p: usize, z: f64) -> f64 {
        z * self.std[p] + self.mean[p]
    }

    pub fn normalize_static(&self, k: usize, x: f64) -> f64 {
        (x - self.static_mean[k]) / self.static_std[k]
    }

    /// Errors if `ds` does not carry the columns this normalizer was fitted on.
    pub fn check_schema(&self, ds: &ForecastDataset) -> Result<()> {
        if ds.feature_names() == self.feature_names.as_slice() {
            return Ok(());
        }
        let missing: Vec<_> = self.feature_names.iter().filter(|f| !ds.feature_names().contains(f)).collect();
        let extra: Vec<_> = ds.feature_names().iter().filter(|f| !self.feature_names.contains(f)).collect();
        Err(Error::Schema(format!(
            "feature columns differ from the training data: missing {missing:?}, unexpected {extra:?}"
        )))
    }
}
