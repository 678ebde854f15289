//! Stations, the (day, station, member, feature) forecast tensor and split bookkeeping.

pub mod io;
pub mod normalize;

pub use io::{load_dataset, save_dataset, DatasetPaths};
pub use normalize::{Normalizer, STATIC_FEATURES};

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: i64,
    pub lat: f64,
    pub lon: f64,
    /// Altitude in meters.
    pub alt: f64,
    /// Station altitude minus model surface height, meters.
    pub orog: f64,
}

impl Station {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Schema(format!(
                "station {} has coordinates out of range ({}, {})",
                self.id, self.lat, self.lon
            )));
        }
        Ok(())
    }

    pub(crate) fn static_features(&self) -> [f64; 4] {
        [self.alt, self.orog, self.lat, self.lon]
    }
}

/// Ensemble forecasts and matching observations, indexed `(t, s, n, p)`.
///
/// `t` indexes `days`, `s` indexes `stations`, `n` the member and `p` the
/// feature column. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDataset {
    stations: Vec<Station>,
    days: Vec<i64>,
    n_members: usize,
    feature_names: Vec<String>,
    features: Vec<f64>,
    yday: Vec<[f64; 2]>,
    observations: Vec<f64>,
}

impl ForecastDataset {
    pub fn new(
        stations: Vec<Station>,
        days: Vec<i64>,
        n_members: usize,
        feature_names: Vec<String>,
        features: Vec<f64>,
        yday: Vec<[f64; 2]>,
        observations: Vec<f64>,
    ) -> Result<Self> {
        if n_members == 0 {
            return Err(Error::Schema("dataset needs at least one member".into()));
        }
        if feature_names.is_empty() {
            return Err(Error::Schema("dataset needs at least one feature".into()));
        }
        let mut seen = HashSet::new();
        for st in &stations {
            st.validate()?;
            if !seen.insert(st.id) {
                return Err(Error::Schema(format!("duplicate station id {}", st.id)));
            }
        }
        let (nt, ns, np) = (days.len(), stations.len(), feature_names.len());
        if features.len() != nt * ns * n_members * np {
            return Err(Error::Shape(format!(
                "feature tensor has {} values, expected {}x{}x{}x{}",
                features.len(),
                nt,
                ns,
                n_members,
                np
            )));
        }
        if yday.len() != nt || observations.len() != nt * ns {
            return Err(Error::Shape("yday/observation lengths do not match days x stations".into()));
        }
        Ok(Self { stations, days, n_members, feature_names, features, yday, observations })
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn days(&self) -> &[i64] {
        &self.days
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn n_members(&self) -> usize {
        self.n_members
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// `(n_days, n_stations, n_members, n_features)`
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n_days(), self.n_stations(), self.n_members, self.n_features())
    }

    fn offset(&self, t: usize, s: usize, n: usize) -> usize {
        ((t * self.stations.len() + s) * self.n_members + n) * self.feature_names.len()
    }

    pub fn feature(&self, t: usize, s: usize, n: usize, p: usize) -> f64 {
        self.features[self.offset(t, s, n) + p]
    }

    /// Feature vector of one member.
    pub fn member(&self, t: usize, s: usize, n: usize) -> &[f64] {
        let o = self.offset(t, s, n);
        &self.features[o..o + self.feature_names.len()]
    }

    /// All member features of one station on one day, member-major.
    pub fn station_block(&self, t: usize, s: usize) -> &[f64] {
        let o = self.offset(t, s, 0);
        &self.features[o..o + self.n_members * self.feature_names.len()]
    }

    pub fn features_raw(&self) -> &[f64] {
        &self.features
    }

    pub fn yday(&self, t: usize) -> [f64; 2] {
        self.yday[t]
    }

    pub fn observation(&self, t: usize, s: usize) -> f64 {
        self.observations[t * self.stations.len() + s]
    }

    pub fn observations_raw(&self) -> &[f64] {
        &self.observations
    }

    pub fn day_position(&self, day: i64) -> Option<usize> {
        self.days.iter().position(|&d| d == day)
    }

    /// Copy with the feature tensor replaced; used by permutation importance.
    pub fn with_features(&self, features: Vec<f64>) -> Result<Self> {
        Self::new(
            self.stations.clone(),
            self.days.clone(),
            self.n_members,
            self.feature_names.clone(),
            features,
            self.yday.clone(),
            self.observations.clone(),
        )
    }

    pub fn with_yday(&self, yday: Vec<[f64; 2]>) -> Result<Self> {
        let mut out = self.clone();
        if yday.len() != out.yday.len() {
            return Err(Error::Shape("yday length".into()));
        }
        out.yday = yday;
        Ok(out)
    }

    pub fn with_stations(&self, stations: Vec<Station>) -> Result<Self> {
        if stations.len() != self.stations.len() {
            return Err(Error::Shape("station count".into()));
        }
        let mut out = self.clone();
        out.stations = stations;
        Ok(out)
    }

    /// Keep only the given members (by index), in the given order.
    pub fn select_members(&self, members: &[usize]) -> Result<Self> {
        if members.is_empty() || members.iter().any(|&m| m >= self.n_members) {
            return Err(Error::Config(format!(
                "member selection {members:?} invalid for {} members",
                self.n_members
            )));
        }
        let np = self.n_features();
        let mut features = Vec::with_capacity(self.n_days() * self.n_stations() * members.len() * np);
        for t in 0..self.n_days() {
            for s in 0..self.n_stations() {
                for &m in members {
                    features.extend_from_slice(self.member(t, s, m));
                }
            }
        }
        Self::new(
            self.stations.clone(),
            self.days.clone(),
            members.len(),
            self.feature_names.clone(),
            features,
            self.yday.clone(),
            self.observations.clone(),
        )
    }

    /// Keep only the given day positions.
    pub fn select_days(&self, positions: &[usize]) -> Result<Self> {
        let block = self.n_stations() * self.n_members * self.n_features();
        let mut features = Vec::with_capacity(positions.len() * block);
        let mut obs = Vec::with_capacity(positions.len() * self.n_stations());
        let mut days = Vec::with_capacity(positions.len());
        let mut yday = Vec::with_capacity(positions.len());
        for &t in positions {
            if t >= self.n_days() {
                return Err(Error::Config(format!("day position {t} out of range")));
            }
            features.extend_from_slice(&self.features[t * block..(t + 1) * block]);
            let ns = self.n_stations();
            obs.extend_from_slice(&self.observations[t * ns..(t + 1) * ns]);
            days.push(self.days[t]);
            yday.push(self.yday[t]);
        }
        Self::new(
            self.stations.clone(),
            days,
            self.n_members,
            self.feature_names.clone(),
            features,
            yday,
            obs,
        )
    }
}

/// Replace the member dimension by per-(day, station) member mean and sample
/// standard deviation of every feature. Output has one member and columns
/// `<name>_mean, <name>_std` for each input column.
pub fn summarize_members(ds: &ForecastDataset) -> ForecastDataset {
    let (nt, ns, nm, np) = ds.shape();
    let mut features = Vec::with_capacity(nt * ns * 2 * np);
    for t in 0..nt {
        for s in 0..ns {
            summarize_block(ds.station_block(t, s), nm, np, &mut features);
        }
    }
    let names = ds
        .feature_names
        .iter()
        .flat_map(|n| [format!("{n}_mean"), format!("{n}_std")])
        .collect();
    ForecastDataset {
        stations: ds.stations.clone(),
        days: ds.days.clone(),
        n_members: 1,
        feature_names: names,
        features,
        yday: ds.yday.clone(),
        observations: ds.observations.clone(),
    }
}

/// Appends `(mean, std)` pairs for each of the `np` columns of a member-major block.
pub(crate) fn summarize_block(block: &[f64], nm: usize, np: usize, out: &mut Vec<f64>) {
    for p in 0..np {
        // Summation in a fixed order over sorted values keeps the result
        // bitwise identical under member permutation.
        let mut vals: Vec<f64> = (0..nm).map(|n| block[n * np + p]).collect();
        vals.sort_by(f64::total_cmp);
        let mean = vals.iter().sum::<f64>() / nm as f64;
        let std = if nm > 1 {
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nm - 1) as f64).sqrt()
        } else {
            0.0
        };
        out.push(mean);
        out.push(std);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitLabel {
    R2R,
    R2F,
}

/// Train / validation / test day ranges, as positions into `ForecastDataset::days`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
    pub label: SplitLabel,
}

impl SplitSpec {
    pub fn new(train: Range<usize>, valid: Range<usize>, test: Range<usize>, label: SplitLabel) -> Result<Self> {
        let overlaps = |a: &Range<usize>, b: &Range<usize>| a.start < b.end && b.start < a.end;
        if overlaps(&train, &valid) || overlaps(&train, &test) || overlaps(&valid, &test) {
            return Err(Error::Config(format!("split ranges overlap: {train:?} {valid:?} {test:?}")));
        }
        Ok(Self { train, valid, test, label })
    }

    /// Consecutive blocks in roughly the reforecast archive proportions
    /// (train 62.5 %, valid 20 %, test the rest).
    pub fn proportional(n_days: usize) -> Self {
        let train = (n_days as f64 * 0.625).round() as usize;
        let valid = (n_days as f64 * 0.2).round() as usize;
        let train = train.max(1).min(n_days);
        let valid = valid.min(n_days - train);
        Self {
            train: 0..train,
            valid: train..train + valid,
            test: train + valid..n_days,
            label: SplitLabel::R2R,
        }
    }

    /// Whole dataset used for testing (R2F evaluation on separate forecasts).
    pub fn all_test(n_days: usize) -> Self {
        Self { train: 0..0, valid: 0..0, test: 0..n_days, label: SplitLabel::R2F }
    }

    pub fn summary(&self) -> String {
        format!(
            "{:?}: train {} days, valid {} days, test {} days",
            self.label,
            self.train.len(),
            self.valid.len(),
            self.test.len()
        )
    }
}
