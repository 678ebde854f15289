//! The post-processing models behind one prediction interface.
//!
//! Graph models (GAT, SMRY, DS) share the same network: station embedding,
//! input projection, residual attention blocks and the Deep Set head. They
//! differ only in the graph they see. DRN is a dense network on per-station
//! summary statistics. ENS is the raw ensemble and has no parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::data::{summarize_members, ForecastDataset, Normalizer, SplitSpec};
use crate::error::{Error, Result};
use crate::gnn::{DeepSetHead, GnnStack};
use crate::graph::{build_topology, input_width, node_inputs, EdgeIndex, Topology, DEFAULT_EPS};
use crate::tensor::{Activation, Dense, ParamId, ParamRecord, ParamStore, Tape, Tensor, Var};

/// Lower bound added to every predicted standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Gat,
    Smry,
    Ds,
    Drn,
    Ens,
}

impl ModelKind {
    pub const TRAINABLE: [ModelKind; 4] = [ModelKind::Gat, ModelKind::Smry, ModelKind::Ds, ModelKind::Drn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gat => "gat",
            ModelKind::Smry => "smry",
            ModelKind::Ds => "ds",
            ModelKind::Drn => "drn",
            ModelKind::Ens => "ens",
        }
    }

    /// Whether the model sees member summaries rather than members.
    pub fn uses_summary(self) -> bool {
        matches!(self, ModelKind::Smry | ModelKind::Drn)
    }

    fn topology(self) -> Option<Topology> {
        match self {
            ModelKind::Gat | ModelKind::Smry => Some(Topology::Full),
            ModelKind::Ds => Some(Topology::SelfLoopsOnly),
            ModelKind::Drn | ModelKind::Ens => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gat" => Ok(ModelKind::Gat),
            "smry" => Ok(ModelKind::Smry),
            "ds" => Ok(ModelKind::Ds),
            "drn" => Ok(ModelKind::Drn),
            "ens" => Ok(ModelKind::Ens),
            other => Err(Error::Config(format!("unknown model '{other}' (expected gat, smry, ds, drn or ens)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    /// Number of residual attention blocks.
    pub n_blocks: usize,
    pub heads: usize,
    pub embedding_dim: usize,
    pub d_max_km: f64,
    pub eps: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, hidden: usize, n_blocks: usize, heads: usize) -> Self {
        Self { kind, hidden, n_blocks, heads, embedding_dim: 20, d_max_km: 100.0, eps: DEFAULT_EPS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ModelKind::Ens {
            return Err(Error::Config("the raw ensemble has no trainable parameters".into()));
        }
        if self.hidden == 0 || self.heads == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("hidden, heads and embedding_dim must be positive".into()));
        }
        if self.kind != ModelKind::Drn && self.n_blocks == 0 {
            return Err(Error::Config("graph models need at least one block".into()));
        }
        if !(self.d_max_km > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("d_max and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Everything fitted on the training data that every ensemble member shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelContext {
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    /// Station ids in embedding-row order.
    pub station_ids: Vec<i64>,
    /// Mean and standard deviation of the training observations; the network
    /// output is mapped to `mu = loc + scale * o0`, `sigma = scale * softplus(o1)`.
    pub loc: f64,
    pub scale: f64,
    pub n_train_members: usize,
    /// Column names of the raw member features the model was trained on.
    pub raw_features: Vec<String>,
}

impl ModelContext {
    pub fn fit(config: ModelConfig, ds: &ForecastDataset, split: &SplitSpec) -> Result<Self> {
        config.validate()?;
        let view = model_view(config.kind, ds);
        let normalizer = Normalizer::fit(&view, split)?;
        let ys: Vec<f64> = split.train.clone().flat_map(|t| (0..ds.n_stations()).map(move |s| (t, s))).map(|(t, s)| ds.observation(t, s)).collect();
        let loc = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - loc).powi(2)).sum::<f64>() / ys.len() as f64;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self {
            config,
            normalizer,
            station_ids: ds.stations().iter().map(|s| s.id).collect(),
            loc,
            scale,
            n_train_members: ds.n_members(),
            raw_features: ds.feature_names().to_vec(),
        })
    }

    /// Embedding row of every station of `ds`, in dataset order.
    pub fn station_rows(&self, ds: &ForecastDataset) -> Result<Vec<usize>> {
        let index: HashMap<i64, usize> = self.station_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        ds.stations()
            .iter()
            .map(|s| index.get(&s.id).copied().ok_or_else(|| Error::Lookup(format!("station id {} was not seen in training", s.id))))
            .collect()
    }

    /// Schema check of raw input columns, with the differences spelled out.
    pub fn check_features(&self, ds: &ForecastDataset) -> Result<()> {
        let have = ds.feature_names();
        if have == self.raw_features.as_slice() {
            return Ok(());
        }
        let missing: Vec<_> = self.raw_features.iter().filter(|f| !have.contains(f)).cloned().collect();
        let extra: Vec<_> = have.iter().filter(|f| !self.raw_features.contains(f)).cloned().collect();
        Err(Error::Schema(format!(
            "feature columns differ from training: missing {missing:?}, unexpected {extra:?}, expected order {:?}",
            self.raw_features
        )))
    }
}

fn model_view(kind: ModelKind, ds: &ForecastDataset) -> ForecastDataset {
    if kind.uses_summary() {
        summarize_members(ds)
    } else {
        ds.clone()
    }
}

/// A dataset prepared for one model: the (possibly summarized) view, its
/// graph and the embedding row of every station.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub view: ForecastDataset,
    pub edges: Option<Arc<EdgeIndex>>,
    pub station_rows: Vec<usize>,
    node_rows: Arc<Vec<usize>>,
}

impl PreparedData {
    pub fn new(ctx: &ModelContext, ds: &ForecastDataset) -> Result<Self> {
        ctx.check_features(ds)?;
        let station_rows = ctx.station_rows(ds)?;
        let view = model_view(ctx.config.kind, ds);
        let edges = match ctx.config.kind.topology() {
            Some(top) => Some(Arc::new(build_topology(view.stations(), view.n_members(), ctx.config.d_max_km, ctx.config.eps, top)?)),
            None => None,
        };
        Ok(Self::assemble(view, edges, station_rows))
    }

    fn assemble(view: ForecastDataset, edges: Option<Arc<EdgeIndex>>, station_rows: Vec<usize>) -> Self {
        let nm = view.n_members();
        let node_rows = Arc::new((0..station_rows.len() * nm).map(|v| station_rows[v / nm]).collect());
        Self { view, edges, station_rows, node_rows }
    }

    /// Same data with a different station-to-embedding assignment.
    pub fn with_station_rows(&self, station_rows: Vec<usize>) -> Result<Self> {
        if station_rows.len() != self.station_rows.len() {
            return Err(Error::Shape(format!("{} embedding rows for {} stations", station_rows.len(), self.station_rows.len())));
        }
        Ok(Self::assemble(self.view.clone(), self.edges.clone(), station_rows))
    }

    /// Same graph and embeddings over a view with replaced member features or
    /// day encodings. Static station features may differ too; the graph keeps
    /// the original topology.
    pub fn with_view(&self, view: ForecastDataset) -> Result<Self> {
        if view.shape() != self.view.shape() {
            return Err(Error::Shape("replacement view has a different shape".into()));
        }
        Ok(Self::assemble(view, self.edges.clone(), self.station_rows.clone()))
    }

    pub fn n_days(&self) -> usize {
        self.view.n_days()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Arch {
    Graph { stack: GnnStack, head: DeepSetHead },
    Drn { layers: [Dense; 3] },
}

/// One trained (or freshly initialized) network.
#[derive(Debug, Clone)]
pub struct Network {
    pub store: ParamStore,
    embedding: ParamId,
    arch: Arch,
}

/// Tape entries of one day's forward pass.
pub struct DayOutput {
    pub mu: Var,
    pub sigma: Var,
}

impl Network {
    pub fn new(ctx: &ModelContext, seed: u64) -> Result<Self> {
        let cfg = &ctx.config;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = store.add_embedding("embedding", ctx.station_ids.len(), cfg.embedding_dim, &mut rng);
        let in_dim = input_width(ctx.normalizer.feature_names.len()) + cfg.embedding_dim;
        let arch = if cfg.kind == ModelKind::Drn {
            Arch::Drn {
                layers: [
                    Dense::new(&mut store, "drn.0", in_dim, cfg.hidden, &mut rng),
                    Dense::new(&mut store, "drn.1", cfg.hidden, cfg.hidden, &mut rng),
                    Dense::new(&mut store, "drn.2", cfg.hidden, 2, &mut rng),
                ],
            }
        } else {
            let stack = GnnStack::new(&mut store, in_dim, cfg.hidden, cfg.heads, cfg.n_blocks, &mut rng)?;
            let head = DeepSetHead::new(&mut store, cfg.hidden, cfg.hidden, &mut rng);
            Arch::Graph { stack, head }
        };
        Ok(Self { store, embedding, arch })
    }

    pub fn from_records(ctx: &ModelContext, records: &[ParamRecord]) -> Result<Self> {
        let mut net = Self::new(ctx, 0)?;
        net.store.load_records(records)?;
        Ok(net)
    }

    /// Forward pass for day position `t` using the network's own parameters.
    pub fn forward(&self, ctx: &ModelContext, tape: &mut Tape, data: &PreparedData, t: usize) -> Result<DayOutput> {
        self.forward_with(ctx, &self.store, tape, data, t)
    }

    /// Forward pass reading parameter values from `store`, which must have the
    /// layout of this network.
    pub fn forward_with(
        &self,
        ctx: &ModelContext,
        store: &ParamStore,
        tape: &mut Tape,
        data: &PreparedData,
        t: usize,
    ) -> Result<DayOutput> {
        if t >= data.view.n_days() {
            return Err(Error::Config(format!("day position {t} outside {} days", data.view.n_days())));
        }
        let x = tape.input(node_inputs(&data.view, &ctx.normalizer, t));
        let table = tape.param(store, self.embedding);
        let emb = tape.gather_rows(table, Arc::clone(&data.node_rows))?;
        let z = tape.concat(&[x, emb])?;
        let raw = match &self.arch {
            Arch::Graph { stack, head } => {
                let edges = data.edges.as_ref().ok_or_else(|| Error::Config("graph model without a graph".into()))?;
                let h = stack.forward(tape, store, edges, z)?;
                head.forward(tape, store, h, data.view.n_members())?
            }
            Arch::Drn { layers } => {
                let mut h = z;
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.forward(tape, store, h)?;
                    if i + 1 < layers.len() {
                        h = tape.activation(h, Activation::Elu);
                    }
                }
                h
            }
        };
        let o0 = tape.column(raw, 0)?;
        let o1 = tape.column(raw, 1)?;
        let mu = tape.affine(o0, ctx.scale, ctx.loc);
        let sp = tape.activation(o1, Activation::Softplus);
        let sigma = tape.affine(sp, ctx.scale, SIGMA_FLOOR);
        Ok(DayOutput { mu, sigma })
    }

    pub fn predict_day(&self, ctx: &ModelContext, data: &PreparedData, t: usize) -> Result<Vec<GaussianPrediction>> {
        let mut tape = Tape::new();
        let out = self.forward(ctx, &mut tape, data, t)?;
        let (mu, sigma) = (tape.value(out.mu), tape.value(out.sigma));
        let preds: Vec<_> = mu.data().iter().zip(sigma.data()).map(|(&mu, &sigma)| GaussianPrediction { mu, sigma }).collect();
        if preds.iter().any(|p| !p.mu.is_finite() || !p.sigma.is_finite() || p.sigma <= 0.0) {
            return Err(Error::NonFinite(format!("prediction for day {} is not finite", data.view.days()[t])));
        }
        Ok(preds)
    }

    /// Station-embedding table, one row per training station.
    pub fn embeddings(&self) -> &Tensor {
        &self.store.get(self.embedding).value
    }
}

/// Member group sizes used when a model trained on `n_train` members sees
/// `n_test`: groups of `n_train - 1` with the remainder added to the last
/// group, or a single group when `n_test < n_train`.
pub fn member_groups(n_test: usize, n_train: usize) -> Vec<usize> {
    if n_test < n_train || n_test == 0 {
        return vec![n_test];
    }
    let g = n_train.saturating_sub(1).max(1);
    let k = n_test / g;
    if k <= 1 {
        return vec![n_test];
    }
    let mut sizes = vec![g; k];
    sizes[k - 1] += n_test % g;
    sizes
}

/// Element-wise mean of several per-station predictions.
pub fn average_predictions(sets: &[Vec<GaussianPrediction>]) -> Vec<GaussianPrediction> {
    let Some(first) = sets.first() else { return Vec::new() };
    let k = sets.len() as f64;
    (0..first.len())
        .map(|s| GaussianPrediction {
            mu: sets.iter().map(|p| p[s].mu).sum::<f64>() / k,
            sigma: sets.iter().map(|p| p[s].sigma).sum::<f64>() / k,
        })
        .collect()
}

/// A trained ensemble of networks whose predictions are averaged.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub ctx: ModelContext,
    pub members: Vec<Network>,
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.ctx.config.kind
    }

    pub fn prepare(&self, ds: &ForecastDataset) -> Result<PreparedData> {
        PreparedData::new(&self.ctx, ds)
    }

    /// Mean over ensemble members of the per-station prediction for day `t`.
    pub fn predict_prepared(&self, data: &PreparedData, t: usize) -> Result<Vec<GaussianPrediction>> {
        let sets = self.members.iter().map(|m| m.predict_day(&self.ctx, data, t)).collect::<Result<Vec<_>>>()?;
        Ok(average_predictions(&sets))
    }

    /// Predictions for every day of `ds`, indexed `[t][s]`.
    pub fn predict(&self, ds: &ForecastDataset) -> Result<Vec<Vec<GaussianPrediction>>> {
        let data = self.prepare(ds)?;
        self.predict_all(&data)
    }

    pub fn predict_all(&self, data: &PreparedData) -> Result<Vec<Vec<GaussianPrediction>>> {
        map_days(data.n_days(), |t| self.predict_prepared(data, t))
    }

    /// Predict each member group separately and average, following
    /// [`member_groups`]. Returns the predictions and the group sizes.
    pub fn predict_grouped(&self, ds: &ForecastDataset) -> Result<(Vec<Vec<GaussianPrediction>>, Vec<usize>)> {
        let sizes = member_groups(ds.n_members(), self.ctx.n_train_members);
        if sizes.len() == 1 {
            return Ok((self.predict(ds)?, sizes));
        }
        let mut start = 0;
        let mut per_group = Vec::with_capacity(sizes.len());
        for &g in &sizes {
            let members: Vec<usize> = (start..start + g).collect();
            start += g;
            per_group.push(self.predict(&ds.select_members(&members)?)?);
        }
        let out = (0..ds.n_days())
            .map(|t| {
                let sets: Vec<_> = per_group.iter().map(|p| p[t].clone()).collect();
                average_predictions(&sets)
            })
            .collect();
        Ok((out, sizes))
    }
}

#[cfg(feature = "parallel")]
pub(crate) fn map_days<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_days<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n).map(f).collect()
}
