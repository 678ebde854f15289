//! CSV ingestion and export.
//!
//! ```text
//! stations.csv      id,lat,lon,alt,orog
//! forecasts.csv     day,station_id,member,<feature_1>,...,<feature_P>,yday_sin,yday_cos
//! observations.csv  day,station_id,obs
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{ForecastDataset, Station};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub stations: PathBuf,
    pub forecasts: PathBuf,
    pub observations: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            stations: dir.join("stations.csv"),
            forecasts: dir.join("forecasts.csv"),
            observations: dir.join("observations.csv"),
        }
    }

    pub fn all(&self) -> [&Path; 3] {
        [&self.stations, &self.forecasts, &self.observations]
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse { file: path.display().to_string(), line, message: message.into() }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    parse_err(path, line, e.to_string())
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    let raw = rec.get(i).ok_or_else(|| parse_err(path, line, format!("missing column `{what}`")))?;
    raw.parse::<T>()
        .map_err(|_| parse_err(path, line, format!("cannot parse `{raw}` as {what}")))
}

fn expect_header(path: &Path, header: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for (i, name) in expected.iter().enumerate() {
        if header.get(i) != Some(name) {
            return Err(parse_err(
                path,
                1,
                format!("expected column {} to be `{name}`, found {:?}", i + 1, header.get(i)),
            ));
        }
    }
    Ok(())
}

fn load_stations(path: &Path) -> Result<Vec<Station>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    expect_header(path, &header, &["id", "lat", "lon", "alt", "orog"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let st = Station {
            id: field(path, &rec, 0, "id")?,
            lat: field(path, &rec, 1, "lat")?,
            lon: field(path, &rec, 2, "lon")?,
            alt: field(path, &rec, 3, "alt")?,
            orog: field(path, &rec, 4, "orog")?,
        };
        st.validate().map_err(|e| parse_err(path, rec.position().map_or(0, |p| p.line()), e.to_string()))?;
        out.push(st);
    }
    Ok(out)
}

struct ForecastRow {
    member: usize,
    values: Vec<f64>,
    yday: [f64; 2],
}

/// Read the three CSV files into a dataset with aligned `(t, s, n)` indexing.
pub fn load_dataset(paths: &DatasetPaths) -> Result<ForecastDataset> {
    let stations = load_stations(&paths.stations)?;
    let station_pos: HashMap<i64, usize> = stations.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    if station_pos.len() != stations.len() {
        return Err(Error::Schema(format!("duplicate station ids in {}", paths.stations.display())));
    }

    let path = paths.forecasts.as_path();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    expect_header(path, &header, &["day", "station_id", "member"])?;
    let ncol = header.len();
    if ncol < 6 || &header[ncol - 2] != "yday_sin" || &header[ncol - 1] != "yday_cos" {
        return Err(parse_err(path, 1, "header must end with at least one feature then yday_sin,yday_cos"));
    }
    let feature_names: Vec<String> = (3..ncol - 2).map(|i| header[i].to_string()).collect();
    let np = feature_names.len();

    let mut by_day: BTreeMap<i64, HashMap<usize, Vec<ForecastRow>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != ncol {
            return Err(parse_err(path, line, format!("expected {ncol} fields, found {}", rec.len())));
        }
        let day: i64 = field(path, &rec, 0, "day")?;
        let sid: i64 = field(path, &rec, 1, "station_id")?;
        let member: usize = field(path, &rec, 2, "member")?;
        let s = *station_pos.get(&sid).ok_or_else(|| {
            Error::Alignment(format!("{}:{line}: unknown station id {sid}", path.display()))
        })?;
        let mut values = Vec::with_capacity(np);
        for i in 0..np {
            values.push(field(path, &rec, 3 + i, &feature_names[i])?);
        }
        let yday = [field(path, &rec, ncol - 2, "yday_sin")?, field(path, &rec, ncol - 1, "yday_cos")?];
        by_day.entry(day).or_default().entry(s).or_default().push(ForecastRow { member, values, yday });
    }
    if by_day.is_empty() {
        return Err(Error::Schema(format!("{} contains no forecasts", path.display())));
    }

    let ns = stations.len();
    let mut n_members = None;
    let mut features = Vec::new();
    let mut yday = Vec::new();
    let days: Vec<i64> = by_day.keys().copied().collect();
    for (&day, per_station) in by_day.iter_mut() {
        let mut day_yday = None;
        for s in 0..ns {
            let rows = per_station.get_mut(&s).ok_or_else(|| {
                Error::Schema(format!("day {day}: no forecasts for station {}", stations[s].id))
            })?;
            rows.sort_by_key(|r| r.member);
            let nm = *n_members.get_or_insert(rows.len());
            if rows.len() != nm {
                return Err(Error::Schema(format!(
                    "day {day}, station {}: {} members, expected {nm}",
                    stations[s].id,
                    rows.len()
                )));
            }
            for (n, row) in rows.iter().enumerate() {
                if row.member != n {
                    return Err(Error::Schema(format!(
                        "day {day}, station {}: members must be numbered 0..{nm}, found {}",
                        stations[s].id, row.member
                    )));
                }
                features.extend_from_slice(&row.values);
                day_yday.get_or_insert(row.yday);
            }
        }
        yday.push(day_yday.expect("at least one station"));
    }

    let path = paths.observations.as_path();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    expect_header(path, &header, &["day", "station_id", "obs"])?;
    let day_pos: HashMap<i64, usize> = days.iter().enumerate().map(|(i, &d)| (d, i)).collect();
    let mut observations = vec![f64::NAN; days.len() * ns];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let day: i64 = field(path, &rec, 0, "day")?;
        let sid: i64 = field(path, &rec, 1, "station_id")?;
        let obs: f64 = field(path, &rec, 2, "obs")?;
        let s = *station_pos.get(&sid).ok_or_else(|| {
            Error::Alignment(format!("{}:{line}: unknown station id {sid}", path.display()))
        })?;
        // Observations for days without forecasts are ignored.
        if let Some(&t) = day_pos.get(&day) {
            observations[t * ns + s] = obs;
        }
    }
    if let Some(i) = observations.iter().position(|v| v.is_nan()) {
        return Err(Error::Alignment(format!(
            "missing observation for day {} station {}",
            days[i / ns],
            stations[i % ns].id
        )));
    }

    ForecastDataset::new(stations, days, n_members.unwrap_or(1), feature_names, features, yday, observations)
}

fn writer(path: &Path) -> Result<std::io::BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(std::io::BufWriter::new(File::create(path)?))
}

/// Write the dataset as the three CSV files. Floats use the shortest
/// representation that parses back to the identical value.
pub fn save_dataset(ds: &ForecastDataset, paths: &DatasetPaths) -> Result<()> {
    let mut w = writer(&paths.stations)?;
    writeln!(w, "id,lat,lon,alt,orog")?;
    for st in ds.stations() {
        writeln!(w, "{},{:?},{:?},{:?},{:?}", st.id, st.lat, st.lon, st.alt, st.orog)?;
    }
    w.flush()?;

    let mut w = writer(&paths.forecasts)?;
    write!(w, "day,station_id,member")?;
    for name in ds.feature_names() {
        write!(w, ",{name}")?;
    }
    writeln!(w, ",yday_sin,yday_cos")?;
    let (nt, ns, nm, _) = ds.shape();
    for t in 0..nt {
        let [ys, yc] = ds.yday(t);
        for s in 0..ns {
            for n in 0..nm {
                write!(w, "{},{},{}", ds.days()[t], ds.stations()[s].id, n)?;
                for v in ds.member(t, s, n) {
                    write!(w, ",{v:?}")?;
                }
                writeln!(w, ",{ys:?},{yc:?}")?;
            }
        }
    }
    w.flush()?;

    let mut w = writer(&paths.observations)?;
    writeln!(w, "day,station_id,obs")?;
    for t in 0..nt {
        for s in 0..ns {
            writeln!(w, "{},{},{:?}", ds.days()[t], ds.stations()[s].id, ds.observation(t, s))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::tiny;

    fn write(dir: &Path, name: &str, body: &str) {
        std::fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn shape_of_loaded_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(3, 2, 11);
        let paths = DatasetPaths::in_dir(dir.path());
        save_dataset(&ds, &paths).unwrap();
        let back = load_dataset(&paths).unwrap();
        assert_eq!(back.shape(), (3, 2, 11, 2));
        assert_eq!(back, ds);
    }

    #[test]
    fn unknown_station_is_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "stations.csv", "id,lat,lon,alt,orog\n1,47,8,100,0\n");
        write(
            dir.path(),
            "forecasts.csv",
            "day,station_id,member,t2m,yday_sin,yday_cos\n0,1,0,1.5,0,1\n0,999,0,2.5,0,1\n",
        );
        write(dir.path(), "observations.csv", "day,station_id,obs\n0,1,1.0\n");
        let err = load_dataset(&DatasetPaths::in_dir(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Alignment(ref m) if m.contains("999")), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "stations.csv", "id,lat,lon,alt,orog\n1,47,8,100,0\n");
        write(
            dir.path(),
            "forecasts.csv",
            "day,station_id,member,t2m,yday_sin,yday_cos\n0,1,0,1.5,0,1\n1,1,0,abc,0,1\n",
        );
        write(dir.path(), "observations.csv", "day,station_id,obs\n0,1,1.0\n1,1,2.0\n");
        match load_dataset(&DatasetPaths::in_dir(dir.path())).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn inconsistent_member_count_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "stations.csv", "id,lat,lon,alt,orog\n1,47,8,100,0\n");
        write(
            dir.path(),
            "forecasts.csv",
            "day,station_id,member,t2m,yday_sin,yday_cos\n0,1,0,1,0,1\n0,1,1,2,0,1\n1,1,0,3,0,1\n",
        );
        write(dir.path(), "observations.csv", "day,station_id,obs\n0,1,1.0\n1,1,2.0\n");
        let err = load_dataset(&DatasetPaths::in_dir(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn missing_observation_is_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "stations.csv", "id,lat,lon,alt,orog\n1,47,8,100,0\n2,48,9,10,0\n");
        write(
            dir.path(),
            "forecasts.csv",
            "day,station_id,member,t2m,yday_sin,yday_cos\n0,1,0,1,0,1\n0,2,0,2,0,1\n",
        );
        write(dir.path(), "observations.csv", "day,station_id,obs\n0,1,1.0\n");
        let err = load_dataset(&DatasetPaths::in_dir(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Alignment(ref m) if m.contains("station 2")), "{err}");
    }
}
