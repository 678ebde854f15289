//! Per-day forecast graphs over (station, member) nodes.
//!
//! Two nodes are joined by a directed edge (in both directions) when they
//! belong to the same station or their stations are closer than `d_max`.
//! Cross-station edges carry `distance / d_max`; same-station edges,
//! self-loops included, carry a small constant `eps`.

use std::io::Write;
use std::sync::Arc;

use crate::data::{ForecastDataset, Normalizer, Station};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_EPS: f64 = 1e-6;

/// Haversine distance between two `(lat, lon)` points in degrees.
pub fn geodesic_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    /// Same-station cliques plus sub-threshold cross-station edges.
    Full,
    /// Only the `(v, v)` self-loops.
    SelfLoopsOnly,
}

/// Directed edges sorted by destination, then source.
///
/// `offsets[v]..offsets[v + 1]` is the range of edges entering node `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub attr: Vec<f64>,
    pub offsets: Vec<usize>,
}

impl EdgeIndex {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn incoming(&self, v: usize) -> std::ops::Range<usize> {
        self.offsets[v]..self.offsets[v + 1]
    }

    /// Build from an unsorted edge list.
    pub fn from_edges(n_nodes: usize, mut edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(s, d, _)) = edges.iter().find(|(s, d, _)| *s >= n_nodes || *d >= n_nodes) {
            return Err(Error::Shape(format!("edge ({s}, {d}) references a node >= {n_nodes}")));
        }
        edges.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut offsets = vec![0; n_nodes + 1];
        for &(_, d, _) in &edges {
            offsets[d + 1] += 1;
        }
        for v in 0..n_nodes {
            offsets[v + 1] += offsets[v];
        }
        Ok(Self {
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
            attr: edges.iter().map(|e| e.2).collect(),
            offsets,
        })
    }
}

/// Edge structure for `stations` with `n_members` nodes each. Node index is
/// `s * n_members + n`.
pub fn build_topology(
    stations: &[Station],
    n_members: usize,
    d_max: f64,
    eps: f64,
    topology: Topology,
) -> Result<EdgeIndex> {
    if !(d_max > 0.0) {
        return Err(Error::Config(format!("d_max must be positive, got {d_max}")));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let ns = stations.len();
    let nm = n_members;
    let n_nodes = ns * nm;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut attr = Vec::new();
    let mut offsets = Vec::with_capacity(n_nodes + 1);
    offsets.push(0);

    if topology == Topology::SelfLoopsOnly {
        for v in 0..n_nodes {
            src.push(v);
            dst.push(v);
            attr.push(eps);
            offsets.push(v + 1);
        }
        return Ok(EdgeIndex { src, dst, attr, offsets });
    }

    // Source stations per destination station, ascending, with their edge attribute.
    let neighbours: Vec<Vec<(usize, f64)>> = (0..ns)
        .map(|j| {
            (0..ns)
                .filter_map(|i| {
                    if i == j {
                        return Some((i, eps));
                    }
                    let d = geodesic_km((stations[i].lat, stations[i].lon), (stations[j].lat, stations[j].lon));
                    (d < d_max).then_some((i, d / d_max))
                })
                .collect()
        })
        .collect();

    for j in 0..ns {
        for v in 0..nm {
            let node = j * nm + v;
            for &(i, a) in &neighbours[j] {
                for u in 0..nm {
                    src.push(i * nm + u);
                    dst.push(node);
                    attr.push(a);
                }
            }
            offsets.push(src.len());
        }
    }
    Ok(EdgeIndex { src, dst, attr, offsets })
}

/// Graph for one day: nodes, edges and node feature rows.
#[derive(Debug, Clone)]
pub struct ForecastGraph {
    pub day: i64,
    pub n_stations: usize,
    pub n_members: usize,
    pub edges: Arc<EdgeIndex>,
    /// One row per node: normalized member features, normalized static
    /// station features, yday encoding and, when supplied, the station embedding.
    pub features: Tensor,
}

impl ForecastGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_stations * self.n_members
    }

    /// `(station, member)` of a node.
    pub fn node(&self, v: usize) -> (usize, usize) {
        (v / self.n_members, v % self.n_members)
    }

    /// Edge list CSV: `day,src_s,src_n,dst_s,dst_n,dist_norm`.
    pub fn write_edge_csv<W: Write>(&self, mut w: W, with_header: bool) -> Result<()> {
        if with_header {
            writeln!(w, "day,src_s,src_n,dst_s,dst_n,dist_norm")?;
        }
        for e in 0..self.edges.len() {
            let (ss, sn) = self.node(self.edges.src[e]);
            let (ds, dn) = self.node(self.edges.dst[e]);
            writeln!(w, "{},{ss},{sn},{ds},{dn},{:?}", self.day, self.edges.attr[e])?;
        }
        Ok(())
    }
}

/// Width of the non-learned part of a node feature row.
pub fn input_width(n_features: usize) -> usize {
    n_features + 4 + 2
}

/// Non-learned node inputs for day position `t`, one row per `(s, n)`.
pub fn node_inputs(ds: &ForecastDataset, nz: &Normalizer, t: usize) -> Tensor {
    let (_, ns, nm, np) = ds.shape();
    let width = input_width(np);
    let mut data = Vec::with_capacity(ns * nm * width);
    let yd = ds.yday(t);
    for (s, st) in ds.stations().iter().enumerate() {
        let stat = st.static_features();
        for n in 0..nm {
            for (p, &x) in ds.member(t, s, n).iter().enumerate() {
                data.push(nz.normalize(p, x));
            }
            for (k, &x) in stat.iter().enumerate() {
                data.push(nz.normalize_static(k, x));
            }
            data.extend_from_slice(&yd);
        }
    }
    Tensor::from_vec(ns * nm, width, data).expect("row layout")
}

/// Build the forecast graph of day position `t`.
///
/// `embeddings`, when given, holds one vector per station (in dataset order)
/// that is appended to the feature row of each of the station's nodes.
pub fn build_graph(
    ds: &ForecastDataset,
    nz: &Normalizer,
    t: usize,
    d_max: f64,
    eps: f64,
    embeddings: Option<&[Vec<f64>]>,
) -> Result<ForecastGraph> {
    if t >= ds.n_days() {
        return Err(Error::Config(format!("day position {t} outside {} days", ds.n_days())));
    }
    nz.check_schema(ds)?;
    let edges = build_topology(ds.stations(), ds.n_members(), d_max, eps, Topology::Full)?;
    let mut features = node_inputs(ds, nz, t);
    if let Some(emb) = embeddings {
        if emb.len() != ds.n_stations() {
            return Err(Error::Shape(format!("{} embeddings for {} stations", emb.len(), ds.n_stations())));
        }
        let dim = emb.first().map_or(0, Vec::len);
        if emb.iter().any(|e| e.len() != dim) {
            return Err(Error::Shape("embedding vectors differ in length".into()));
        }
        let nm = ds.n_members();
        let rows: Vec<usize> = (0..features.rows()).map(|v| v / nm).collect();
        let table = Tensor::from_vec(emb.len(), dim, emb.concat())?;
        features = Tensor::hcat(&[&features, &table.gather_rows(&rows)])?;
    }
    Ok(ForecastGraph {
        day: ds.days()[t],
        n_stations: ds.n_stations(),
        n_members: ds.n_members(),
        edges: Arc::new(edges),
        features,
    })
}
