//! Synthetic station networks and ensemble forecasts with a known error structure.
//!
//! For every day `t` and station `s`:
//!
//! ```text
//! signal(t,s) = seasonal(t) + lapse * alt(s) + weather(t, position(s))
//! y(t,s)      = signal(t,s) + sigma_true * zeta(t,s)
//! center(t,s) = signal(t,s) + bias(s) + local_error * delta(t,s)
//! member n    = center(t,s) + spread_error * sigma_true * eta(t,s,n)
//! ```
//!
//! `weather` is a smooth random field redrawn every day, so nearby stations
//! see nearly the same signal while `delta` is independent per station. A
//! model that pools neighbouring ensembles can average `delta` out, one that
//! looks at a single station cannot. The last feature column is pure noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::data::{ForecastDataset, Station};
use crate::error::{Error, Result};
use crate::graph::geodesic_km;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BiasField {
    PerStation,
    SpatiallyCorrelated,
}

impl std::str::FromStr for BiasField {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-station" => Ok(Self::PerStation),
            "spatially-correlated" => Ok(Self::SpatiallyCorrelated),
            other => Err(Error::Config(format!(
                "unknown bias field `{other}` (expected per-station or spatially-correlated)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_stations: usize,
    pub n_days: usize,
    pub n_members: usize,
    pub n_features: usize,
    pub seed: u64,
    pub bias_field: BiasField,
    /// Multiplier on the member dispersion; 1 means members scatter like the
    /// unpredictable part of the observation.
    pub spread_error: f64,
    /// Kilometers.
    pub spatial_corr_length: f64,
    /// Day index of the first generated day. Day 0 is the first of January.
    pub first_day: i64,
    /// Standard deviation of the unpredictable part of the observation.
    pub sigma_true: f64,
    /// Standard deviation of the per-station, per-day forecast error shared by all members.
    pub local_error: f64,
    pub bias_mean: f64,
    pub bias_scale: f64,
    /// Amplitude of the daily weather field, kelvin.
    pub weather_amplitude: f64,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_stations: 20,
            n_days: 2650,
            n_members: 11,
            n_features: 4,
            seed: 42,
            bias_field: BiasField::SpatiallyCorrelated,
            spread_error: 1.0,
            spatial_corr_length: 250.0,
            first_day: 0,
            sigma_true: 1.0,
            local_error: 1.2,
            bias_mean: 0.5,
            bias_scale: 1.5,
            weather_amplitude: 3.0,
            lat_range: (45.0, 50.0),
            lon_range: (5.0, 15.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_stations", self.n_stations),
            ("n_days", self.n_days),
            ("n_members", self.n_members),
            ("n_features", self.n_features),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.bias_field == BiasField::SpatiallyCorrelated && !(self.spatial_corr_length > 0.0) {
            return Err(Error::Config("spatial_corr_length must be positive".into()));
        }
        if !(self.sigma_true > 0.0) || !(self.spread_error >= 0.0) || !(self.local_error >= 0.0) {
            return Err(Error::Config("sigma_true must be positive, spread_error and local_error non-negative".into()));
        }
        if self.first_day < 0 {
            return Err(Error::Config("first_day must be non-negative".into()));
        }
        let (la, lb) = self.lat_range;
        let (oa, ob) = self.lon_range;
        if !(-90.0..=90.0).contains(&la) || !(-90.0..=90.0).contains(&lb) || la >= lb {
            return Err(Error::Config("invalid latitude box".into()));
        }
        if !(-180.0..=180.0).contains(&oa) || !(-180.0..=180.0).contains(&ob) || oa >= ob {
            return Err(Error::Config("invalid longitude box".into()));
        }
        Ok(())
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = vec!["t2m".to_string()];
        if self.n_features >= 2 {
            for k in 1..self.n_features - 1 {
                names.push(format!("aux{k}"));
            }
            names.push(NOISE_FEATURE.to_string());
        }
        names
    }
}

/// Name of the column that carries no information about the observations.
pub const NOISE_FEATURE: &str = "noise";

const LAPSE_PER_M: f64 = -0.0065;
const KM_PER_DEG: f64 = 111.195;

/// Hidden quantities of a generated dataset.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub bias: Vec<f64>,
    /// `signal(t, s)`, row-major over `(t, s)`.
    pub signal: Vec<f64>,
}

impl SynthTruth {
    /// Predictive distribution of `y` given only the station's own ensemble,
    /// with the bias known: `N(mean - bias, sigma_true^2 + local_error^2 + spread^2 / N)`.
    pub fn own_ensemble_oracle(&self, cfg: &SynthConfig, ds: &ForecastDataset, t: usize, s: usize) -> (f64, f64) {
        let nm = ds.n_members();
        let mean = (0..nm).map(|n| ds.feature(t, s, n, 0)).sum::<f64>() / nm as f64;
        let spread = cfg.spread_error * cfg.sigma_true;
        let var = cfg.sigma_true.powi(2) + cfg.local_error.powi(2) + spread * spread / nm as f64;
        (mean - self.bias[s], var.sqrt())
    }

    /// The distribution `y` was actually drawn from: `N(signal, sigma_true^2)`.
    pub fn generating(&self, cfg: &SynthConfig, n_stations: usize, t: usize, s: usize) -> (f64, f64) {
        (self.signal[t * n_stations + s], cfg.sigma_true)
    }
}

fn local_xy(cfg: &SynthConfig, st: &Station) -> (f64, f64) {
    let lat_mid = 0.5 * (cfg.lat_range.0 + cfg.lat_range.1);
    let x = (st.lon - cfg.lon_range.0) * KM_PER_DEG * lat_mid.to_radians().cos();
    let y = (st.lat - cfg.lat_range.0) * KM_PER_DEG;
    (x, y)
}

/// Place stations inside the configured box by growing a network outward:
/// every new station lands 25-85 km from an existing one, so each station
/// has a neighbour within 100 km. For three or more stations, placements in
/// which every pair is within 100 km are redrawn.
pub fn place_stations(cfg: &SynthConfig) -> Result<Vec<Station>> {
    if cfg.n_stations == 0 {
        return Err(Error::Config("n_stations must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _attempt in 0..1000 {
        if let Some(coords) = try_place(cfg, &mut rng) {
            let far_pair_exists = cfg.n_stations < 3
                || coords.iter().enumerate().any(|(i, a)| {
                    coords[i + 1..].iter().any(|b| geodesic_km(*a, *b) >= 100.0)
                });
            if far_pair_exists {
                return Ok(coords
                    .into_iter()
                    .enumerate()
                    .map(|(i, (lat, lon))| Station {
                        id: i as i64 + 1,
                        lat,
                        lon,
                        alt: rng.random_range(0.0..1200.0),
                        orog: 80.0 * rng.sample::<f64, _>(StandardNormal),
                    })
                    .collect());
            }
        }
    }
    Err(Error::Config("could not place stations in the configured box; enlarge it".into()))
}

fn try_place(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<Vec<(f64, f64)>> {
    let (la, lb) = cfg.lat_range;
    let (oa, ob) = cfg.lon_range;
    let mut coords = vec![(
        la + (lb - la) * rng.random_range(0.3..0.7),
        oa + (ob - oa) * rng.random_range(0.3..0.7),
    )];
    while coords.len() < cfg.n_stations {
        let mut placed = false;
        for _ in 0..200 {
            let anchor = coords[rng.random_range(0..coords.len())];
            let dist = rng.random_range(25.0..85.0);
            let bearing = rng.random_range(0.0..2.0 * PI);
            let lat = anchor.0 + dist * bearing.cos() / KM_PER_DEG;
            let lon = anchor.1 + dist * bearing.sin() / (KM_PER_DEG * anchor.0.to_radians().cos());
            if !(la..=lb).contains(&lat) || !(oa..=ob).contains(&lon) {
                continue;
            }
            if coords.iter().any(|c| geodesic_km(*c, (lat, lon)) < 15.0) {
                continue;
            }
            coords.push((lat, lon));
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(coords)
}

fn station_bias(cfg: &SynthConfig, stations: &[Station], rng: &mut ChaCha8Rng) -> Vec<f64> {
    match cfg.bias_field {
        BiasField::PerStation => stations
            .iter()
            .map(|_| cfg.bias_mean + cfg.bias_scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        BiasField::SpatiallyCorrelated => {
            let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
            let l = cfg.spatial_corr_length;
            stations
                .iter()
                .map(|st| {
                    let (x, y) = local_xy(cfg, st);
                    cfg.bias_mean + cfg.bias_scale * 2f64.sqrt() * (x / l + p1).sin() * (y / l + p2).cos()
                })
                .collect()
        }
    }
}

struct WeatherField {
    modes: Vec<(f64, f64, f64, f64)>,
}

impl WeatherField {
    fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        // Wavelength of four correlation lengths keeps neighbours 100 km apart
        // highly correlated.
        let k = 2.0 * PI / (4.0 * cfg.spatial_corr_length.max(1.0));
        let modes = (0..4)
            .map(|_| {
                let dir = rng.random_range(0.0..2.0 * PI);
                let amp: f64 = rng.sample(StandardNormal);
                let phase = rng.random_range(0.0..2.0 * PI);
                (k * dir.cos(), k * dir.sin(), amp, phase)
            })
            .collect();
        Self { modes }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.modes.iter().map(|&(kx, ky, a, ph)| a * (kx * x + ky * y + ph).cos()).sum::<f64>()
            / (self.modes.len() as f64 / 2.0).sqrt()
    }
}

fn seasonal(day: i64) -> f64 {
    let doy = day.rem_euclid(365) as f64;
    10.0 + 8.0 * (2.0 * PI * (doy - 110.0) / 365.25).sin()
}

fn yday_encoding(day: i64) -> [f64; 2] {
    let a = 2.0 * PI * day.rem_euclid(365) as f64 / 365.25;
    [a.sin(), a.cos()]
}

pub fn generate(cfg: &SynthConfig) -> Result<ForecastDataset> {
    generate_with_truth(cfg).map(|(ds, _)| ds)
}

/// Deterministic in `cfg`. Days use independent random streams, so a
/// configuration that only moves `first_day` shares stations and biases but
/// not weather.
pub fn generate_with_truth(cfg: &SynthConfig) -> Result<(ForecastDataset, SynthTruth)> {
    cfg.validate()?;
    let stations = place_stations(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let bias = station_bias(cfg, &stations, &mut rng);

    let xy: Vec<(f64, f64)> = stations.iter().map(|st| local_xy(cfg, st)).collect();
    let ns = stations.len();
    let nm = cfg.n_members;
    let names = cfg.feature_names();
    let np = names.len();
    let spread = cfg.spread_error * cfg.sigma_true;

    let mut features = Vec::with_capacity(cfg.n_days * ns * nm * np);
    let mut observations = Vec::with_capacity(cfg.n_days * ns);
    let mut signal = Vec::with_capacity(cfg.n_days * ns);
    let mut yday = Vec::with_capacity(cfg.n_days);
    let days: Vec<i64> = (0..cfg.n_days as i64).map(|d| cfg.first_day + d).collect();

    for &day in &days {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2 + day as u64);
        let weather = WeatherField::draw(cfg, &mut rng);
        let season = seasonal(day);
        yday.push(yday_encoding(day));
        for s in 0..ns {
            let (x, y) = xy[s];
            let sig = season + LAPSE_PER_M * stations[s].alt + cfg.weather_amplitude * weather.at(x, y);
            let zeta: f64 = rng.sample(StandardNormal);
            let delta: f64 = rng.sample(StandardNormal);
            signal.push(sig);
            observations.push(sig + cfg.sigma_true * zeta);
            let center = sig + bias[s] + cfg.local_error * delta;
            for _ in 0..nm {
                let eta: f64 = rng.sample(StandardNormal);
                let t2m = center + spread * eta;
                features.push(t2m);
                if np >= 2 {
                    for k in 1..np - 1 {
                        let xi: f64 = rng.sample(StandardNormal);
                        features.push(t2m + 1.5 * k as f64 + 0.7 * xi);
                    }
                    features.push(rng.sample(StandardNormal));
                }
            }
        }
    }

    let ds = ForecastDataset::new(stations, days, nm, names, features, yday, observations)?;
    Ok((ds, SynthTruth { bias, signal }))
}
