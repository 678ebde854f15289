//! CRPS training with AdamW, early stopping and deep ensembles.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crate::data::{ForecastDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::models::{map_days, ModelConfig, ModelContext, ModelKind, Network, PreparedData, TrainedModel};
use crate::tensor::{ParamRecord, ParamStore, Tape, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update from the gradients held in `store`: decoupled decay
/// `theta *= 1 - lr * wd`, then a bias-corrected Adam step.
pub fn adamw_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Shape(format!("optimizer state for {} parameters, store has {}", state.m.len(), store.len())));
    }
    for p in store.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}` is not finite", p.name)));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    let decay = 1.0 - lr * weight_decay;
    for (i, p) in store.iter_mut().enumerate() {
        if p.value.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!("optimizer state shape mismatch for `{}`", p.name)));
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = p.grad.data();
        for (k, theta) in p.value.data_mut().iter_mut().enumerate() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            let (mh, vh) = (m[k] / bc1, v[k] / bc2);
            *theta = *theta * decay - lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` consecutive epochs bring no new best score.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience: patience.max(1), best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Record the validation score of epoch `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, score: f64) -> EarlyStopDecision {
        if score < self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.since_best = 0;
            return EarlyStopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            EarlyStopDecision::Stop
        } else {
            EarlyStopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        (self.best_epoch > 0).then_some((self.best_epoch, self.best))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lead_time: String,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub ensemble_size: usize,
    pub seed: u64,
    pub d_max_km: f64,
    pub hidden: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub embedding_dim: usize,
    /// Also fit on the validation days (they still drive early stopping).
    pub train_on_valid: bool,
}

pub const PRESETS: [&str; 3] = ["24h", "72h", "120h"];

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (hidden, n_blocks, learning_rate, max_epochs) = match name {
            "24h" => (265, 2, 2e-4, 31),
            "72h" => (128, 2, 1e-4, 42),
            "120h" => (64, 1, 5e-4, 35),
            other => {
                return Err(Error::Config(format!("unknown preset '{other}'; available presets: {}", PRESETS.join(", "))))
            }
        };
        Ok(Self {
            lead_time: name.to_string(),
            batch_size: 8,
            max_epochs,
            learning_rate,
            weight_decay: 1e-4,
            patience: 10,
            ensemble_size: 10,
            seed: 0,
            d_max_km: 100.0,
            hidden,
            heads: 8,
            n_blocks,
            embedding_dim: 20,
            train_on_valid: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("ensemble_size", self.ensemble_size),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("embedding_dim", self.embedding_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.d_max_km > 0.0) {
            return Err(Error::Config("learning_rate and d_max must be positive, weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        let mut m = ModelConfig::new(kind, self.hidden, self.n_blocks, self.heads);
        m.embedding_dim = self.embedding_dim;
        m.d_max_km = self.d_max_km;
        m
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
        }
        match key {
            "lead_time" | "preset" => {
                let keep_seed = self.seed;
                *self = Self::preset(value)?;
                self.seed = keep_seed;
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "ensemble_size" => self.ensemble_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "d_max" | "d_max_km" => self.d_max_km = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "K" | "k" | "n_blocks" => self.n_blocks = num(key, value)?,
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "train_on_valid" => self.train_on_valid = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Apply a flat `key = value` text; `#` starts a comment. A `preset`
    /// line, if present, is applied before the other keys.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`, got '{line}'", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.sort_by_key(|(k, _)| !(k == "preset" || k == "lead_time"));
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "lead_time = {}\nbatch_size = {}\nmax_epochs = {}\nlearning_rate = {}\nweight_decay = {}\npatience = {}\n\
             ensemble_size = {}\nseed = {}\nd_max = {}\nhidden = {}\nheads = {}\nK = {}\nembedding_dim = {}\ntrain_on_valid = {}\n",
            self.lead_time,
            self.batch_size,
            self.max_epochs,
            self.learning_rate,
            self.weight_decay,
            self.patience,
            self.ensemble_size,
            self.seed,
            self.d_max_km,
            self.hidden,
            self.heads,
            self.n_blocks,
            self.embedding_dim,
            self.train_on_valid
        )
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "preset {}: lr {}, K={}, heads={}, hidden={}, batch {}, epochs {}, patience {}, ensemble {}, d_max {} km",
            self.lead_time,
            self.learning_rate,
            self.n_blocks,
            self.heads,
            self.hidden,
            self.batch_size,
            self.max_epochs,
            self.patience,
            self.ensemble_size,
            self.d_max_km
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_crps: f64,
    pub valid_crps: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
    /// Training hit a non-finite loss or gradient; the best earlier state is kept.
    NonFinite(String),
}

/// Outcome of training one network.
#[derive(Debug, Clone)]
pub struct MemberRun {
    pub seed: u64,
    pub network: Network,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_crps: f64,
    pub stop: StopReason,
}

/// Shared state for training any number of networks on one dataset.
pub struct Trainer {
    pub ctx: ModelContext,
    pub cfg: TrainConfig,
    data: PreparedData,
    train_days: Vec<usize>,
    valid_days: Vec<usize>,
    observations: Vec<Arc<Vec<f64>>>,
}

impl Trainer {
    pub fn new(kind: ModelKind, ds: &ForecastDataset, split: &SplitSpec, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if split.train.is_empty() || split.valid.is_empty() {
            return Err(Error::Config(format!("training needs non-empty train and valid ranges ({})", split.summary())));
        }
        if split.train.end > ds.n_days() || split.valid.end > ds.n_days() {
            return Err(Error::Config(format!("split {} exceeds {} days", split.summary(), ds.n_days())));
        }
        let ctx = ModelContext::fit(cfg.model_config(kind), ds, split)?;
        let data = PreparedData::new(&ctx, ds)?;
        let mut train_days: Vec<usize> = split.train.clone().collect();
        if cfg.train_on_valid {
            train_days.extend(split.valid.clone());
        }
        let observations = (0..ds.n_days())
            .map(|t| Arc::new((0..ds.n_stations()).map(|s| ds.observation(t, s)).collect()))
            .collect();
        Ok(Self { ctx, cfg: cfg.clone(), data, train_days, valid_days: split.valid.clone().collect(), observations })
    }

    /// Mean CRPS and parameter gradients of one day.
    fn day_gradient(&self, net: &Network, store: &ParamStore, t: usize) -> Result<(f64, Vec<(usize, Tensor)>)> {
        let mut tape = Tape::new();
        let out = net.forward_with(&self.ctx, store, &mut tape, &self.data, t)?;
        let loss = tape.crps_mean(out.mu, out.sigma, Arc::clone(&self.observations[t]))?;
        let grads = tape.backward(loss)?;
        let l = tape.value(loss).data()[0];
        Ok((l, grads.param_grads().into_iter().map(|(id, g)| (id.0, g.clone())).collect()))
    }

    /// Mean CRPS of `net` over the validation days.
    pub fn validation_crps(&self, net: &Network) -> Result<f64> {
        let scores = map_days(self.valid_days.len(), |i| {
            let t = self.valid_days[i];
            let mut tape = Tape::new();
            let out = net.forward(&self.ctx, &mut tape, &self.data, t)?;
            let loss = tape.crps_mean(out.mu, out.sigma, Arc::clone(&self.observations[t]))?;
            Ok(tape.value(loss).data()[0])
        })?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("validation CRPS is not finite".into()));
        }
        Ok(mean)
    }

    /// One epoch over shuffled day batches; returns the mean training CRPS.
    fn epoch(&self, net: &mut Network, adam: &mut AdamState, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut days = self.train_days.clone();
        days.shuffle(rng);
        let mut total = 0.0;
        for batch in days.chunks(self.cfg.batch_size) {
            let store = &net.store;
            let netr = &*net;
            let results = map_days(batch.len(), |i| self.day_gradient(netr, store, batch[i]))?;
            net.store.zero_grad();
            let w = 1.0 / batch.len() as f64;
            for (loss, grads) in &results {
                total += loss;
                for (id, g) in grads {
                    net.store.get_mut(crate::tensor::ParamId(*id)).grad.scaled_add_assign(w, g);
                }
            }
            adamw_step(&mut net.store, adam, self.cfg.learning_rate, self.cfg.weight_decay)?;
        }
        let mean = total / days.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("training CRPS is not finite".into()));
        }
        Ok(mean)
    }

    /// Train one network from seed `seed`, reverting to the epoch with the
    /// best validation CRPS.
    pub fn train_member(&self, seed: u64) -> Result<MemberRun> {
        let mut net = Network::new(&self.ctx, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
        let mut adam = AdamState::new(&net.store);
        let mut stopper = EarlyStopping::new(self.cfg.patience);
        let mut best_store = net.store.clone();
        let mut trace = Vec::new();
        let mut stop = StopReason::MaxEpochs;
        for epoch in 1..=self.cfg.max_epochs {
            let step = self.epoch(&mut net, &mut adam, &mut rng).and_then(|train| Ok((train, self.validation_crps(&net)?)));
            let (train_crps, valid_crps) = match step {
                Ok(v) => v,
                Err(e) if e.is_numeric() => {
                    log::error!("seed {seed}: epoch {epoch} aborted: {e}");
                    stop = StopReason::NonFinite(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            };
            trace.push(EpochRecord { epoch, train_crps, valid_crps });
            log::info!("seed {seed} epoch {epoch}: train CRPS {train_crps:.5}, valid CRPS {valid_crps:.5}");
            match stopper.observe(epoch, valid_crps) {
                EarlyStopDecision::Improved => best_store = net.store.clone(),
                EarlyStopDecision::Continue => {}
                EarlyStopDecision::Stop => {
                    stop = StopReason::EarlyStopping;
                    break;
                }
            }
        }
        let (best_epoch, best_valid_crps) = match stopper.best() {
            Some(b) => b,
            None => {
                let msg = match &stop {
                    StopReason::NonFinite(m) => m.clone(),
                    _ => "no epoch completed".into(),
                };
                return Err(Error::NonFinite(format!("seed {seed}: training failed before the first validation: {msg}")));
            }
        };
        net.store = best_store;
        Ok(MemberRun { seed, network: net, trace, best_epoch, best_valid_crps, stop })
    }

    pub fn prepared(&self) -> &PreparedData {
        &self.data
    }
}

/// Serialized form of a trained ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleCheckpoint {
    pub format_version: u32,
    pub context: ModelContext,
    pub train_config: TrainConfig,
    pub split: SplitSpec,
    pub members: Vec<CheckpointMember>,
    /// Seeds of members that failed and were dropped.
    pub failed_seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMember {
    pub seed: u64,
    pub best_epoch: usize,
    pub valid_crps: f64,
    pub stop: StopReason,
    pub trace: Vec<EpochRecord>,
    pub params: Vec<ParamRecord>,
}

impl EnsembleCheckpoint {
    pub fn model(&self) -> Result<TrainedModel> {
        let members =
            self.members.iter().map(|m| Network::from_records(&self.context, &m.params)).collect::<Result<Vec<_>>>()?;
        Ok(TrainedModel { ctx: self.context.clone(), members })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Self = serde_json::from_reader(f)?;
        if ck.format_version != 1 {
            return Err(Error::Schema(format!("unsupported checkpoint version {}", ck.format_version)));
        }
        if ck.members.is_empty() {
            return Err(Error::Schema("checkpoint holds no trained members".into()));
        }
        Ok(ck)
    }
}

/// Train `cfg.ensemble_size` networks with seeds `cfg.seed + i`. Members
/// that fail numerically are dropped and listed; it is an error only when
/// none survive.
pub fn train_ensemble(kind: ModelKind, ds: &ForecastDataset, split: &SplitSpec, cfg: &TrainConfig) -> Result<EnsembleCheckpoint> {
    let trainer = Trainer::new(kind, ds, split, cfg)?;
    let mut members = Vec::new();
    let mut failed_seeds = Vec::new();
    for i in 0..cfg.ensemble_size {
        let seed = cfg.seed.wrapping_add(i as u64);
        match trainer.train_member(seed) {
            Ok(run) => members.push(CheckpointMember {
                seed,
                best_epoch: run.best_epoch,
                valid_crps: run.best_valid_crps,
                stop: run.stop,
                trace: run.trace,
                params: run.network.store.to_records(),
            }),
            Err(e) if e.is_numeric() => {
                log::error!("ensemble member with seed {seed} failed: {e}");
                failed_seeds.push(seed);
            }
            Err(e) => return Err(e),
        }
    }
    if members.is_empty() {
        return Err(Error::NonFinite(format!("all {} ensemble members failed", cfg.ensemble_size)));
    }
    Ok(EnsembleCheckpoint {
        format_version: 1,
        context: trainer.ctx,
        train_config: cfg.clone(),
        split: split.clone(),
        members,
        failed_seeds,
    })
}

/// Train a single network; the checkpoint holds one member.
pub fn train_one(kind: ModelKind, ds: &ForecastDataset, split: &SplitSpec, cfg: &TrainConfig, seed: u64) -> Result<EnsembleCheckpoint> {
    let mut one = cfg.clone();
    one.ensemble_size = 1;
    one.seed = seed;
    train_ensemble(kind, ds, split, &one)
}
