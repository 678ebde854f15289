//! Browser bindings for three small interactive views: the Gaussian CRPS
//! as a function of the observation, the station graph at a distance
//! threshold, and the calibration of a synthetic raw ensemble.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use ensgraph::graph::{build_topology, geodesic_km, Topology, DEFAULT_EPS};
use ensgraph::metrics::{crps_ensemble, crps_gaussian, nominal_level, Interval};
use ensgraph::normal;
use ensgraph::synth::{generate, place_stations, SynthConfig};
use ensgraph::Result;

/// CRPS, density and CDF of `N(mu, sigma^2)` on `n` observation values in `[lo, hi]`.
pub fn crps_curve_value(mu: f64, sigma: f64, lo: f64, hi: f64, n: usize) -> Result<Value> {
    if n < 2 || !(hi > lo) {
        return Err(ensgraph::Error::Config("need n >= 2 and hi > lo".into()));
    }
    let mut ys = Vec::with_capacity(n);
    let mut crps = Vec::with_capacity(n);
    let mut pdf = Vec::with_capacity(n);
    let mut cdf = Vec::with_capacity(n);
    for i in 0..n {
        let y = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        ys.push(y);
        crps.push(crps_gaussian(mu, sigma, y)?);
        pdf.push(normal::pdf((y - mu) / sigma) / sigma);
        cdf.push(normal::cdf((y - mu) / sigma));
    }
    Ok(json!({ "y": ys, "crps": crps, "pdf": pdf, "cdf": cdf, "crps_at_mean": crps_gaussian(mu, sigma, mu)? }))
}

/// Synthetic stations and the cross-station links shorter than `d_max_km`.
pub fn station_graph_value(n_stations: usize, seed: u64, d_max_km: f64, n_members: usize) -> Result<Value> {
    let cfg = SynthConfig { n_stations, seed, ..SynthConfig::default() };
    cfg.validate()?;
    let stations = place_stations(&cfg)?;
    let edges = build_topology(&stations, n_members.max(1), d_max_km, DEFAULT_EPS, Topology::Full)?;
    let mut links = Vec::new();
    for i in 0..stations.len() {
        for j in i + 1..stations.len() {
            let d = geodesic_km((stations[i].lat, stations[i].lon), (stations[j].lat, stations[j].lon));
            if d < d_max_km {
                links.push(json!([i, j, d]));
            }
        }
    }
    let st: Vec<Value> = stations.iter().map(|s| json!({ "id": s.id, "lat": s.lat, "lon": s.lon, "alt": s.alt })).collect();
    Ok(json!({
        "stations": st,
        "links": links,
        "n_nodes": edges.n_nodes(),
        "n_edges": edges.len(),
        "lat_range": [cfg.lat_range.0, cfg.lat_range.1],
        "lon_range": [cfg.lon_range.0, cfg.lon_range.1],
    }))
}

/// Verification rank histogram, min-max interval coverage and mean CRPS of
/// a synthetic raw ensemble whose member scatter is scaled by `spread_error`.
pub fn ensemble_calibration_value(n_members: usize, spread_error: f64, seed: u64) -> Result<Value> {
    let cfg = SynthConfig {
        n_stations: 10,
        n_days: 300,
        n_members,
        spread_error,
        seed,
        bias_scale: 0.0,
        bias_mean: 0.0,
        local_error: 0.0,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg)?;
    let (nt, ns, nm, _) = ds.shape();
    let mut ranks = vec![0usize; nm + 1];
    let mut covered = 0usize;
    let mut crps = 0.0;
    for t in 0..nt {
        for s in 0..ns {
            let members: Vec<f64> = (0..nm).map(|n| ds.feature(t, s, n, 0)).collect();
            let y = ds.observation(t, s);
            ranks[members.iter().filter(|&&m| m < y).count()] += 1;
            covered += Interval::ensemble(&members).contains(y) as usize;
            crps += crps_ensemble(&members, y)?;
        }
    }
    let n = (nt * ns) as f64;
    Ok(json!({
        "rank_hist": ranks,
        "coverage": 100.0 * covered as f64 / n,
        "nominal": 100.0 * nominal_level(nm),
        "crps": crps / n,
        "n_cases": nt * ns,
    }))
}

fn to_js(v: Result<Value>) -> std::result::Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn crps_curve(mu: f64, sigma: f64, lo: f64, hi: f64, n: usize) -> std::result::Result<String, JsError> {
    to_js(crps_curve_value(mu, sigma, lo, hi, n))
}

#[wasm_bindgen]
pub fn station_graph(n_stations: usize, seed: u64, d_max_km: f64, n_members: usize) -> std::result::Result<String, JsError> {
    to_js(station_graph_value(n_stations, seed, d_max_km, n_members))
}

#[wasm_bindgen]
pub fn ensemble_calibration(n_members: usize, spread_error: f64, seed: u64) -> std::result::Result<String, JsError> {
    to_js(ensemble_calibration_value(n_members, spread_error, seed))
}
