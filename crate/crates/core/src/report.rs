//! Evaluation reports and the CSV / JSON files they are exchanged in.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{ForecastDataset, SplitLabel};
use crate::error::{Error, Result};
use crate::metrics::{
    crps_ensemble, crps_gaussian, ks_uniform, nominal_level, pi_metrics, pit, pit_histogram, Interval, ScoreSeries,
};
use crate::models::GaussianPrediction;
use crate::stats::{bh_correct, dm_test, normalized_importances, DmResult, DmVariance, ImportanceResult};
use crate::training::EpochRecord;

pub const PIT_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSummary {
    pub station_id: i64,
    pub lat: f64,
    pub lon: f64,
    pub crps_mean: f64,
    pub pi_length: f64,
    pub pi_cover: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Forecasts {
    Gaussian(Vec<Vec<GaussianPrediction>>),
    /// Raw members, `[t][s]`.
    Members(Vec<Vec<Vec<f64>>>),
}

/// Scores and verification statistics of one model on one test set.
#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub model: String,
    pub split: SplitLabel,
    pub n_members: usize,
    pub nominal: f64,
    pub group_sizes: Vec<usize>,
    pub scores: ScoreSeries,
    pub crps_mean: f64,
    /// Mean prediction-interval length.
    pub pi_length: f64,
    /// Coverage in percent.
    pub pi_cover: f64,
    /// PIT values, `[t * S + s]`; empty for the raw ensemble.
    pub pit: Vec<f64>,
    pub per_station: Vec<StationSummary>,
    pub forecasts: Forecasts,
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    model: &'a str,
    split: SplitLabel,
    n_members: usize,
    nominal_level: f64,
    group_sizes: &'a [usize],
    n_days: usize,
    n_stations: usize,
    crps_mean: f64,
    pi_length: f64,
    pi_cover: f64,
    pit_ks: Option<f64>,
    per_station: &'a [StationSummary],
}

fn station_summaries(ds: &ForecastDataset, scores: &ScoreSeries, intervals: &[Interval]) -> Result<Vec<StationSummary>> {
    let (nt, ns) = (ds.n_days(), ds.n_stations());
    let means = scores.station_means();
    (0..ns)
        .map(|s| {
            let iv: Vec<Interval> = (0..nt).map(|t| intervals[t * ns + s]).collect();
            let ys: Vec<f64> = (0..nt).map(|t| ds.observation(t, s)).collect();
            let pm = pi_metrics(&iv, &ys)?;
            let st = &ds.stations()[s];
            Ok(StationSummary {
                station_id: st.id,
                lat: st.lat,
                lon: st.lon,
                crps_mean: means[s],
                pi_length: pm.mean_length,
                pi_cover: pm.coverage,
            })
        })
        .collect()
}

impl EvaluationReport {
    /// Score Gaussian predictions `[t][s]` against the observations of `ds`.
    /// The nominal interval level follows the member count of `ds`.
    pub fn gaussian(
        model: &str,
        split: SplitLabel,
        ds: &ForecastDataset,
        preds: Vec<Vec<GaussianPrediction>>,
        group_sizes: Vec<usize>,
    ) -> Result<Self> {
        let (nt, ns) = (ds.n_days(), ds.n_stations());
        if preds.len() != nt || preds.iter().any(|p| p.len() != ns) {
            return Err(Error::Shape("predictions do not cover every day and station".into()));
        }
        let nominal = nominal_level(ds.n_members());
        let mut values = Vec::with_capacity(nt * ns);
        let mut pits = Vec::with_capacity(nt * ns);
        let mut intervals = Vec::with_capacity(nt * ns);
        for (t, day) in preds.iter().enumerate() {
            for (s, g) in day.iter().enumerate() {
                let y = ds.observation(t, s);
                values.push(crps_gaussian(g.mu, g.sigma, y)?);
                pits.push(pit(g.mu, g.sigma, y)?);
                intervals.push(Interval::gaussian(g.mu, g.sigma, nominal));
            }
        }
        Self::assemble(model, split, ds, values, intervals, pits, group_sizes, Forecasts::Gaussian(preds))
    }

    /// Score the raw ensemble (feature column `p`) with the ensemble CRPS and
    /// the min-max interval.
    pub fn raw_ensemble(split: SplitLabel, ds: &ForecastDataset, p: usize) -> Result<Self> {
        let (nt, ns, nm, np) = ds.shape();
        if p >= np {
            return Err(Error::Config(format!("feature index {p} outside {np} features")));
        }
        let mut values = Vec::with_capacity(nt * ns);
        let mut intervals = Vec::with_capacity(nt * ns);
        let mut members = Vec::with_capacity(nt);
        for t in 0..nt {
            let mut day = Vec::with_capacity(ns);
            for s in 0..ns {
                let m: Vec<f64> = (0..nm).map(|n| ds.feature(t, s, n, p)).collect();
                values.push(crps_ensemble(&m, ds.observation(t, s))?);
                intervals.push(Interval::ensemble(&m));
                day.push(m);
            }
            members.push(day);
        }
        Self::assemble("ens", split, ds, values, intervals, Vec::new(), vec![nm], Forecasts::Members(members))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: &str,
        split: SplitLabel,
        ds: &ForecastDataset,
        values: Vec<f64>,
        intervals: Vec<Interval>,
        pit: Vec<f64>,
        group_sizes: Vec<usize>,
        forecasts: Forecasts,
    ) -> Result<Self> {
        let ys = ds.observations_raw();
        let pm = pi_metrics(&intervals, ys)?;
        let scores = ScoreSeries::new(ds.days().to_vec(), ds.stations().iter().map(|s| s.id).collect(), values)?;
        let per_station = station_summaries(ds, &scores, &intervals)?;
        Ok(Self {
            model: model.to_string(),
            split,
            n_members: ds.n_members(),
            nominal: nominal_level(ds.n_members()),
            group_sizes,
            crps_mean: scores.mean(),
            pi_length: pm.mean_length,
            pi_cover: pm.coverage,
            scores,
            pit,
            per_station,
            forecasts,
        })
    }

    pub fn pit_ks(&self) -> Option<f64> {
        (!self.pit.is_empty()).then(|| ks_uniform(&self.pit))
    }

    pub fn metrics_json(&self) -> Result<String> {
        let j = MetricsJson {
            model: &self.model,
            split: self.split,
            n_members: self.n_members,
            nominal_level: self.nominal,
            group_sizes: &self.group_sizes,
            n_days: self.scores.n_days(),
            n_stations: self.scores.n_stations(),
            crps_mean: self.crps_mean,
            pi_length: self.pi_length,
            pi_cover: self.pi_cover,
            pit_ks: self.pit_ks(),
            per_station: &self.per_station,
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    /// Write `scores.csv`, `predictions.csv`, `metrics.json`,
    /// `per_station.csv` and, for Gaussian models, `pit_hist.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_scores(&self.scores, &dir.join("scores.csv"))?;
        self.write_predictions(&dir.join("predictions.csv"))?;
        std::fs::write(dir.join("metrics.json"), self.metrics_json()?)?;
        write_per_station(&self.per_station, &dir.join("per_station.csv"))?;
        if !self.pit.is_empty() {
            write_pit_histogram(&self.pit, PIT_BINS, &dir.join("pit_hist.csv"))?;
        }
        Ok(())
    }

    pub fn write_predictions(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let days = &self.scores.days;
        let ids = &self.scores.station_ids;
        match &self.forecasts {
            Forecasts::Gaussian(p) => {
                writeln!(w, "day,station_id,mu,sigma")?;
                for (t, day) in p.iter().enumerate() {
                    for (s, g) in day.iter().enumerate() {
                        writeln!(w, "{},{},{:?},{:?}", days[t], ids[s], g.mu, g.sigma)?;
                    }
                }
            }
            Forecasts::Members(m) => {
                let nm = self.n_members;
                let cols: Vec<String> = (0..nm).map(|n| format!("m{n}")).collect();
                writeln!(w, "day,station_id,{}", cols.join(","))?;
                for (t, day) in m.iter().enumerate() {
                    for (s, members) in day.iter().enumerate() {
                        let vals: Vec<String> = members.iter().map(|v| format!("{v:?}")).collect();
                        writeln!(w, "{},{},{}", days[t], ids[s], vals.join(","))?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_scores(scores: &ScoreSeries, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "day,station_id,crps")?;
    for (t, day) in scores.days.iter().enumerate() {
        for (s, id) in scores.station_ids.iter().enumerate() {
            writeln!(w, "{day},{id},{:?}", scores.get(t, s))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a `day,station_id,crps` file back into a full day x station grid.
pub fn read_scores(path: &Path) -> Result<ScoreSeries> {
    let file = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(&file, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(&file, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["day", "station_id", "crps"] {
        return Err(Error::Schema(format!("{file}: expected header day,station_id,crps")));
    }
    let mut cells: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    let mut days = Vec::new();
    let mut ids = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(&file, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse_err = |what: &str| Error::Parse { file: file.clone(), line, message: format!("invalid {what}") };
        let day: i64 = rec[0].parse().map_err(|_| parse_err("day"))?;
        let id: i64 = rec[1].parse().map_err(|_| parse_err("station_id"))?;
        let v: f64 = rec[2].parse().map_err(|_| parse_err("crps"))?;
        if !days.contains(&day) {
            days.push(day);
        }
        if !ids.contains(&id) {
            ids.push(id);
        }
        if cells.insert((day, id), v).is_some() {
            return Err(Error::Schema(format!("{file}: duplicate score for day {day}, station {id}")));
        }
    }
    let mut values = Vec::with_capacity(days.len() * ids.len());
    for &d in &days {
        for &id in &ids {
            values.push(
                *cells
                    .get(&(d, id))
                    .ok_or_else(|| Error::Alignment(format!("{file}: no score for day {d}, station {id}")))?,
            );
        }
    }
    ScoreSeries::new(days, ids, values)
}

fn csv_err(file: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse { file: file.to_string(), line, message: e.to_string() }
}

pub fn write_per_station(rows: &[StationSummary], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "station_id,lat,lon,crps_mean,pi_length,pi_cover")?;
    for r in rows {
        writeln!(w, "{},{:?},{:?},{:?},{:?},{:?}", r.station_id, r.lat, r.lon, r.crps_mean, r.pi_length, r.pi_cover)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_per_station(path: &Path) -> Result<Vec<StationSummary>> {
    let file = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(&file, e))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(&file, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let f = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse { file: file.clone(), line, message: format!("bad column {i}") })
        };
        out.push(StationSummary {
            station_id: f(0)? as i64,
            lat: f(1)?,
            lon: f(2)?,
            crps_mean: f(3)?,
            pi_length: f(4)?,
            pi_cover: f(5)?,
        });
    }
    Ok(out)
}

pub fn write_pit_histogram(values: &[f64], bins: usize, path: &Path) -> Result<()> {
    let counts = pit_histogram(values, bins);
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "bin_lo,bin_hi,count")?;
    for (i, c) in counts.iter().enumerate() {
        writeln!(w, "{:?},{:?},{c}", i as f64 / bins as f64, (i + 1) as f64 / bins as f64)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_training_log(trace: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,train_crps,valid_crps")?;
    for r in trace {
        writeln!(w, "{},{:?},{:?}", r.epoch, r.train_crps, r.valid_crps)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-station `1 - mean_model / mean_ref` with coordinates, `None` where the
/// reference mean is zero.
pub fn write_crpss(stations: &[StationSummary], skill: &[Option<f64>], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "station_id,lat,lon,crpss")?;
    for (st, v) in stations.iter().zip(skill) {
        let v = v.map_or(String::new(), |x| format!("{x:?}"));
        writeln!(w, "{},{:?},{:?},{v}", st.station_id, st.lat, st.lon)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-station DM test outcome after Benjamini-Hochberg correction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DmRow {
    pub station_id: i64,
    pub result: DmResult,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<DmRow>,
    pub alpha: f64,
    pub p_star: Option<f64>,
    /// Fraction of stations where equal performance was rejected and `a`
    /// had the lower mean CRPS.
    pub frac_a_better: f64,
    pub frac_b_better: f64,
    pub frac_rejected: f64,
}

/// DM test per station on paired daily scores (`a - b`), then BH correction
/// over stations. Degenerate stations are never rejected.
pub fn compare(a: &ScoreSeries, b: &ScoreSeries, alpha: f64, variance: DmVariance) -> Result<Comparison> {
    if a.station_ids != b.station_ids {
        let only_a: Vec<_> = a.station_ids.iter().filter(|s| !b.station_ids.contains(s)).collect();
        let only_b: Vec<_> = b.station_ids.iter().filter(|s| !a.station_ids.contains(s)).collect();
        return Err(Error::Alignment(format!(
            "station sets differ: only in first {only_a:?}, only in second {only_b:?} (or different order)"
        )));
    }
    if a.days != b.days {
        return Err(Error::Alignment("score series cover different days".into()));
    }
    let results: Vec<DmResult> = (0..a.n_stations())
        .map(|s| dm_test(&a.station_series(s), &b.station_series(s), variance))
        .collect::<Result<_>>()?;
    let testable: Vec<usize> = (0..results.len()).filter(|&i| !results[i].degenerate).collect();
    let mut rejected = vec![false; results.len()];
    let mut p_star = None;
    if !testable.is_empty() {
        let ps: Vec<f64> = testable.iter().map(|&i| results[i].p.unwrap_or(1.0)).collect();
        let bh = bh_correct(&ps, alpha)?;
        p_star = bh.p_star;
        for (k, &i) in testable.iter().enumerate() {
            rejected[i] = bh.rejected[k];
        }
    }
    let m = results.len() as f64;
    let frac_a_better = (0..results.len()).filter(|&i| rejected[i] && results[i].t < 0.0).count() as f64 / m;
    let frac_b_better = (0..results.len()).filter(|&i| rejected[i] && results[i].t > 0.0).count() as f64 / m;
    let rows = results
        .into_iter()
        .zip(&a.station_ids)
        .zip(&rejected)
        .map(|((result, &station_id), &rejected)| DmRow { station_id, result, rejected })
        .collect();
    Ok(Comparison { rows, alpha, p_star, frac_a_better, frac_b_better, frac_rejected: frac_a_better + frac_b_better })
}

pub fn write_dm_results(cmp: &Comparison, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "station,t,p,rejected")?;
    for r in &cmp.rows {
        let p = r.result.p.map_or(String::new(), |p| format!("{p:?}"));
        writeln!(w, "{},{:?},{p},{}", r.station_id, r.result.t, r.rejected)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_importance(results: &[ImportanceResult], path: &Path) -> Result<()> {
    let norm = normalized_importances(results);
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "feature,imp_mean,imp_std,imp_normalized")?;
    for (r, n) in results.iter().zip(norm) {
        writeln!(w, "{},{:?},{:?},{n:?}", r.feature, r.imp_mean, r.imp_std)?;
    }
    w.flush()?;
    Ok(())
}
