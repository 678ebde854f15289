//! Scores and calibration diagnostics for Gaussian and ensemble forecasts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal::{self, FRAC_1_SQRT_PI};

/// Closed-form CRPS of `N(mu, sigma^2)` against `y`:
/// `sigma * (z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi))`, `z = (y - mu) / sigma`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("CRPS needs sigma > 0, got {sigma}")));
    }
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * normal::cdf(z) - 1.0) + 2.0 * normal::pdf(z) - FRAC_1_SQRT_PI))
}

/// `(d CRPS / d mu, d CRPS / d sigma)`.
pub fn crps_gaussian_grad(mu: f64, sigma: f64, y: f64) -> (f64, f64) {
    let z = (y - mu) / sigma;
    (-(2.0 * normal::cdf(z) - 1.0), 2.0 * normal::pdf(z) - FRAC_1_SQRT_PI)
}

/// CRPS of the empirical distribution of `members`:
/// `mean |x_i - y| - 1/(2 N^2) sum_ij |x_i - x_j|`.
pub fn crps_ensemble(members: &[f64], y: f64) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Domain("ensemble CRPS of an empty member list".into()));
    }
    let n = members.len() as f64;
    let mut sorted = members.to_vec();
    sorted.sort_by(f64::total_cmp);
    // running mean, exact when all errors are equal
    let abs_err = sorted.iter().enumerate().fold(0.0, |m, (i, x)| m + ((x - y).abs() - m) / (i + 1) as f64);
    // sum_ij |x_i - x_j| = 2 sum_i (2i - N + 1) x_(i) for ascending order,
    // folded into pairs (x_(N-1-i) - x_(i)) so equal members cancel exactly
    let k = sorted.len();
    let spread: f64 = (0..k / 2).map(|i| (n - 1.0 - 2.0 * i as f64) * (sorted[k - 1 - i] - sorted[i])).sum();
    Ok((abs_err - spread / (n * n)).max(0.0))
}

/// Nominal level `(N - 1) / (N + 1)` of the central interval spanned by an
/// `N`-member ensemble.
pub fn nominal_level(n_members: usize) -> f64 {
    (n_members as f64 - 1.0) / (n_members as f64 + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    /// Central interval of `N(mu, sigma^2)` at level `nominal`.
    pub fn gaussian(mu: f64, sigma: f64, nominal: f64) -> Self {
        let q = normal::quantile(0.5 * (1.0 + nominal));
        Self { lo: mu - q * sigma, hi: mu + q * sigma }
    }

    /// `[min, max]` of the members.
    pub fn ensemble(members: &[f64]) -> Self {
        let lo = members.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = members.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self { lo, hi }
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    /// Closed interval: endpoints count as covered.
    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiMetrics {
    pub mean_length: f64,
    /// Percent of observations inside their interval.
    pub coverage: f64,
}

pub fn pi_metrics(intervals: &[Interval], ys: &[f64]) -> Result<PiMetrics> {
    if intervals.len() != ys.len() {
        return Err(Error::Shape(format!("{} intervals for {} observations", intervals.len(), ys.len())));
    }
    if ys.is_empty() {
        return Ok(PiMetrics { mean_length: f64::NAN, coverage: f64::NAN });
    }
    let n = ys.len() as f64;
    let mean_length = intervals.iter().map(Interval::length).sum::<f64>() / n;
    let covered = intervals.iter().zip(ys).filter(|(iv, &y)| iv.contains(y)).count();
    Ok(PiMetrics { mean_length, coverage: 100.0 * covered as f64 / n })
}

/// Probability integral transform `Phi((y - mu) / sigma)`.
pub fn pit(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("PIT needs sigma > 0, got {sigma}")));
    }
    Ok(normal::cdf((y - mu) / sigma))
}

/// Counts of PIT values in `bins` equal-width bins over `[0, 1]`.
pub fn pit_histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins.max(1)];
    let nb = counts.len();
    for &v in values {
        let b = ((v * nb as f64).floor() as isize).clamp(0, nb as isize - 1) as usize;
        counts[b] += 1;
    }
    counts
}

/// Kolmogorov-Smirnov distance between a sample and `U(0, 1)`.
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic critical value of the one-sample KS statistic.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    // c(alpha) = sqrt(-ln(alpha / 2) / 2)
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Per-(day, station) score values, day-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub days: Vec<i64>,
    pub station_ids: Vec<i64>,
    pub values: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(days: Vec<i64>, station_ids: Vec<i64>, values: Vec<f64>) -> Result<Self> {
        if values.len() != days.len() * station_ids.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} days x {} stations",
                values.len(),
                days.len(),
                station_ids.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("score {v}")));
        }
        Ok(Self { days, station_ids, values })
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn n_stations(&self) -> usize {
        self.station_ids.len()
    }

    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.values[t * self.station_ids.len() + s]
    }

    /// Scores of one station over all days.
    pub fn station_series(&self, s: usize) -> Vec<f64> {
        (0..self.n_days()).map(|t| self.get(t, s)).collect()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn station_means(&self) -> Vec<f64> {
        (0..self.n_stations())
            .map(|s| self.station_series(s).iter().sum::<f64>() / self.n_days() as f64)
            .collect()
    }
}

/// Station-wise skill `1 - mean_model / mean_ref`; `None` where the
/// reference mean is zero.
pub fn crpss(model: &ScoreSeries, reference: &ScoreSeries) -> Result<Vec<Option<f64>>> {
    if model.station_ids != reference.station_ids {
        return Err(Error::Alignment("CRPSS needs identical station sets".into()));
    }
    Ok(model
        .station_means()
        .iter()
        .zip(reference.station_means())
        .map(|(&m, r)| if r > 0.0 { Some(1.0 - m / r) } else { None })
        .collect())
}
