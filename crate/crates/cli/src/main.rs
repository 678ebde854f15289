//! `ensgraph`: synthesize data, train, evaluate, compare and explain
//! station-graph post-processing models.

mod manifest;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ensgraph::data::io::{load_dataset, save_dataset, DatasetPaths};
use ensgraph::graph::{build_graph, DEFAULT_EPS};
use ensgraph::metrics::crpss;
use ensgraph::report::{compare, read_per_station, read_scores, write_crpss, write_dm_results, write_importance, EvaluationReport};
use ensgraph::stats::{importance_features, normalized_importances, permutation_importance, DmVariance};
use ensgraph::synth::{generate, BiasField, SynthConfig};
use ensgraph::training::{train_ensemble, EnsembleCheckpoint, TrainConfig};
use ensgraph::{ForecastDataset, ModelKind, Normalizer, SplitLabel, SplitSpec};
use manifest::ManifestBuilder;

const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Parser)]
#[command(name = "ensgraph", version, about = "Graph-attention post-processing of ensemble forecasts")]
struct Cli {
    /// Worker threads for per-day parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a deep ensemble of one model kind.
    Train(TrainArgs),
    /// Score a checkpoint (or the raw ensemble) on test days.
    Evaluate(EvaluateArgs),
    /// Diebold-Mariano comparison of two evaluation reports.
    Compare(CompareArgs),
    /// Permutation feature importance of a checkpoint.
    Importance(ImportanceArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_stations: Option<usize>,
    #[arg(long)]
    n_days: Option<usize>,
    #[arg(long)]
    n_members: Option<usize>,
    #[arg(long)]
    n_features: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// per-station or spatially-correlated.
    #[arg(long)]
    bias_field: Option<String>,
    #[arg(long)]
    spread_error: Option<f64>,
    /// Kilometers.
    #[arg(long)]
    spatial_corr_length: Option<f64>,
    #[arg(long)]
    first_day: Option<i64>,
    #[arg(long)]
    sigma_true: Option<f64>,
    #[arg(long)]
    local_error: Option<f64>,
    #[arg(long)]
    bias_mean: Option<f64>,
    #[arg(long)]
    bias_scale: Option<f64>,
    #[arg(long)]
    weather_amplitude: Option<f64>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    lat_range: Option<Vec<f64>>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    lon_range: Option<Vec<f64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainKind {
    Gat,
    Smry,
    Ds,
    Drn,
}

impl From<TrainKind> for ModelKind {
    fn from(k: TrainKind) -> Self {
        match k {
            TrainKind::Gat => ModelKind::Gat,
            TrainKind::Smry => ModelKind::Smry,
            TrainKind::Ds => ModelKind::Ds,
            TrainKind::Drn => ModelKind::Drn,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: TrainKind,
    #[arg(long, default_value = "24h")]
    preset: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` overrides applied after the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single override, e.g. `--set max_epochs=5`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    ensemble_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training days, counted from the first day (default 62.5 %).
    #[arg(long)]
    train_days: Option<usize>,
    /// Validation days following the training days (default 20 %).
    #[arg(long)]
    valid_days: Option<usize>,
    /// Also write the edge list of this day position to graph_edges.csv.
    #[arg(long, value_name = "DAY")]
    dump_graph: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    R2r,
    R2f,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalModel {
    Checkpoint,
    Ens,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `ens` scores the raw members without a trained model.
    #[arg(long, value_enum, default_value = "checkpoint")]
    model: EvalModel,
    #[arg(long)]
    data: PathBuf,
    /// r2r scores the test days of the training split; r2f scores every day.
    #[arg(long, value_enum, default_value = "r2r")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    /// Member feature holding the raw forecast of the target (default: first column).
    #[arg(long)]
    ens_feature: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    /// Two report directories (or scores.csv files), A then B.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    reports: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Use the demeaned variance in the DM statistic.
    #[arg(long)]
    demeaned: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImportanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "r2r")]
    split: SplitArg,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict to these features (default: all).
    #[arg(long, value_delimiter = ',')]
    features: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Importance(a) => cmd_importance(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage/config, 2 data, 3 numeric failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<ensgraph::Error>()) {
        Some(err) if err.is_config() => 1,
        Some(err) if err.is_numeric() => 3,
        Some(_) => 2,
        None if e.chain().any(|c| c.downcast_ref::<UsageError>().is_some()) => 1,
        None => 2,
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn load(dir: &Path, manifest: &mut ManifestBuilder) -> Result<ForecastDataset> {
    let paths = DatasetPaths::in_dir(dir);
    for p in paths.all() {
        manifest.input(p)?;
    }
    Ok(load_dataset(&paths)?)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    macro_rules! apply {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    apply!(n_stations, n_days, n_members, n_features, seed, spread_error, spatial_corr_length, first_day, sigma_true, local_error, bias_mean, bias_scale, weather_amplitude);
    if let Some(b) = &a.bias_field {
        cfg.bias_field = b.parse::<BiasField>()?;
    }
    if let Some(r) = &a.lat_range {
        cfg.lat_range = (r[0], r[1]);
    }
    if let Some(r) = &a.lon_range {
        cfg.lon_range = (r[0], r[1]);
    }
    let mut manifest = ManifestBuilder::new("synth", serde_json::to_value(&cfg)?);
    manifest.seeds([cfg.seed]);
    let ds = generate(&cfg)?;
    create_out(&a.out)?;
    save_dataset(&ds, &DatasetPaths::in_dir(&a.out))?;
    manifest.finish(&a.out)?;
    println!(
        "wrote {} days x {} stations x {} members ({} features) to {}",
        ds.n_days(),
        ds.n_stations(),
        ds.n_members(),
        ds.n_features(),
        a.out.display()
    );
    Ok(())
}

fn train_split(n_days: usize, train: Option<usize>, valid: Option<usize>) -> Result<SplitSpec> {
    let default = SplitSpec::proportional(n_days);
    let nt = train.unwrap_or(default.train.len());
    let nv = valid.unwrap_or(default.valid.len());
    if nt + nv > n_days {
        return Err(usage(format!("{nt} train + {nv} valid days exceed the {n_days} days of the dataset")));
    }
    Ok(SplitSpec::new(0..nt, nt..nt + nv, nt + nv..n_days, SplitLabel::R2R)?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::preset(&a.preset)?;
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(n) = a.ensemble_size {
        cfg.ensemble_size = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let kind = ModelKind::from(a.model);
    println!("{kind}: {cfg}");

    let mut manifest = ManifestBuilder::new("train", serde_json::json!({ "model": kind.name(), "train_config": &cfg }));
    if let Some(path) = &a.config {
        manifest.input(path)?;
    }
    let ds = load(&a.data, &mut manifest)?;
    let split = train_split(ds.n_days(), a.train_days, a.valid_days)?;
    println!("split {}", split.summary());
    create_out(&a.out)?;

    if let Some(t) = a.dump_graph {
        let nz = Normalizer::fit(&ds, &split)?;
        let g = build_graph(&ds, &nz, t, cfg.d_max_km, DEFAULT_EPS, None)?;
        let mut w = BufWriter::new(File::create(a.out.join("graph_edges.csv"))?);
        g.write_edge_csv(&mut w, true)?;
        w.flush()?;
    }

    let ck = train_ensemble(kind, &ds, &split, &cfg)?;
    manifest.seeds(ck.members.iter().map(|m| m.seed).chain(ck.failed_seeds.iter().copied()));
    for m in &ck.members {
        println!("member seed {}: best epoch {}, valid CRPS {:.5}, stop {:?}", m.seed, m.best_epoch, m.valid_crps, m.stop);
    }
    if !ck.failed_seeds.is_empty() {
        println!("dropped members (non-finite): {:?}", ck.failed_seeds);
    }
    ck.save(&a.out.join(CHECKPOINT_FILE))?;
    std::fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let mut w = BufWriter::new(File::create(a.out.join("training_log.csv"))?);
    writeln!(w, "seed,epoch,train_crps,valid_crps")?;
    for m in &ck.members {
        for r in &m.trace {
            writeln!(w, "{},{},{:?},{:?}", m.seed, r.epoch, r.train_crps, r.valid_crps)?;
        }
    }
    w.flush()?;
    drop(w);
    manifest.finish(&a.out)?;
    Ok(())
}

/// Day positions scored under `split`.
fn test_positions(split: SplitArg, ck: Option<&EnsembleCheckpoint>, n_days: usize) -> Result<(SplitLabel, Vec<usize>)> {
    match split {
        SplitArg::R2f => Ok((SplitLabel::R2F, (0..n_days).collect())),
        SplitArg::R2r => {
            let range = match ck {
                Some(ck) => ck.split.test.clone(),
                None => SplitSpec::proportional(n_days).test,
            };
            if range.end > n_days {
                bail!(ensgraph::Error::Alignment(format!(
                    "checkpoint test days {range:?} lie outside the {n_days} days of the data; use --split r2f for new forecasts"
                )));
            }
            if range.is_empty() {
                return Err(usage("the r2r split has no test days"));
            }
            Ok((SplitLabel::R2R, range.collect()))
        }
    }
}

fn ens_feature_index(ds: &ForecastDataset, name: Option<&str>) -> Result<usize> {
    match name {
        None => Ok(0),
        Some(n) => ds.feature_index(n).ok_or_else(|| {
            usage(format!("unknown feature '{n}'; available: {}", ds.feature_names().join(", ")))
        }),
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let ck = match (&a.checkpoint, a.model) {
        (Some(p), _) => Some(EnsembleCheckpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        (None, EvalModel::Ens) => None,
        (None, EvalModel::Checkpoint) => return Err(usage("--checkpoint is required unless --model ens")),
    };
    let mut manifest = ManifestBuilder::new(
        "evaluate",
        serde_json::json!({
            "model": match a.model { EvalModel::Ens => "ens".to_string(), EvalModel::Checkpoint => ck.as_ref().map(|c| c.context.config.kind.name().to_string()).unwrap_or_default() },
            "split": format!("{:?}", match a.split { SplitArg::R2r => SplitLabel::R2R, SplitArg::R2f => SplitLabel::R2F }),
            "ens_feature": a.ens_feature,
        }),
    );
    if let Some(p) = &a.checkpoint {
        manifest.input(p)?;
    }
    let ds = load(&a.data, &mut manifest)?;
    let (label, positions) = test_positions(a.split, ck.as_ref(), ds.n_days())?;
    let test = ds.select_days(&positions)?;
    let p = ens_feature_index(&test, a.ens_feature.as_deref())?;
    let ens = EvaluationReport::raw_ensemble(label, &test, p)?;
    create_out(&a.out)?;

    let report = match (a.model, &ck) {
        (EvalModel::Ens, _) | (_, None) => ens,
        (EvalModel::Checkpoint, Some(ck)) => {
            manifest.seeds(ck.members.iter().map(|m| m.seed));
            let model = ck.model()?;
            model.ctx.check_features(&test)?;
            let (preds, groups) = model.predict_grouped(&test)?;
            println!("member groups: {groups:?}");
            log::info!("R2F grouping of {} members: {groups:?}", test.n_members());
            let report = EvaluationReport::gaussian(model.kind().name(), label, &test, preds, groups)?;
            let skill = crpss(&report.scores, &ens.scores)?;
            write_crpss(&report.per_station, &skill, &a.out.join("crpss.csv"))?;
            report
        }
    };
    report.write_dir(&a.out)?;
    manifest.finish(&a.out)?;
    print!(
        "{} {:?}: {} days x {} stations, CRPS {:.5}, PI length {:.4}, PI cover {:.2}% (nominal {:.2}%)",
        report.model,
        report.split,
        test.n_days(),
        test.n_stations(),
        report.crps_mean,
        report.pi_length,
        report.pi_cover,
        100.0 * report.nominal
    );
    match report.pit_ks() {
        Some(ks) => println!(", PIT KS {ks:.4}"),
        None => println!(),
    }
    Ok(())
}

fn report_files(p: &Path) -> (PathBuf, Option<PathBuf>) {
    if p.is_dir() {
        let stations = p.join("per_station.csv");
        (p.join("scores.csv"), stations.exists().then_some(stations))
    } else {
        (p.to_path_buf(), None)
    }
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(usage(format!("--alpha must lie in (0, 1), got {}", a.alpha)));
    }
    let variance = if a.demeaned { DmVariance::Demeaned } else { DmVariance::Raw };
    let mut manifest = ManifestBuilder::new("compare", serde_json::json!({ "alpha": a.alpha, "demeaned": a.demeaned }));
    let (sa, pa) = report_files(&a.reports[0]);
    let (sb, _) = report_files(&a.reports[1]);
    manifest.input(&sa)?;
    manifest.input(&sb)?;
    let scores_a = read_scores(&sa)?;
    let scores_b = read_scores(&sb)?;
    let cmp = compare(&scores_a, &scores_b, a.alpha, variance)?;
    create_out(&a.out)?;
    write_dm_results(&cmp, &a.out.join("dm_results.csv"))?;
    if let Some(pa) = pa {
        manifest.input(&pa)?;
        let stations = read_per_station(&pa)?;
        if stations.iter().map(|s| s.station_id).ne(scores_a.station_ids.iter().copied()) {
            bail!(ensgraph::Error::Alignment(format!("{} does not match the stations of {}", pa.display(), sa.display())));
        }
        write_crpss(&stations, &crpss(&scores_a, &scores_b)?, &a.out.join("crpss.csv"))?;
    }
    let summary = serde_json::json!({
        "alpha": cmp.alpha,
        "p_star": cmp.p_star,
        "n_stations": cmp.rows.len(),
        "frac_rejected": cmp.frac_rejected,
        "frac_a_better": cmp.frac_a_better,
        "frac_b_better": cmp.frac_b_better,
        "mean_crps_a": scores_a.mean(),
        "mean_crps_b": scores_b.mean(),
    });
    std::fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    manifest.finish(&a.out)?;
    println!(
        "stations with rejected equal performance at alpha {}: {:.1}% (A better {:.1}%, B better {:.1}%)",
        a.alpha,
        100.0 * cmp.frac_rejected,
        100.0 * cmp.frac_a_better,
        100.0 * cmp.frac_b_better
    );
    Ok(())
}

fn cmd_importance(a: ImportanceArgs) -> Result<()> {
    if a.reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    let ck = EnsembleCheckpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let mut manifest = ManifestBuilder::new(
        "importance",
        serde_json::json!({ "reps": a.reps, "seed": a.seed, "features": &a.features, "split": format!("{:?}", match a.split { SplitArg::R2r => SplitLabel::R2R, SplitArg::R2f => SplitLabel::R2F }) }),
    );
    manifest.input(&a.checkpoint)?;
    manifest.seeds([a.seed]);
    let ds = load(&a.data, &mut manifest)?;
    let (_, positions) = test_positions(a.split, Some(&ck), ds.n_days())?;
    let test = ds.select_days(&positions)?;
    let model = ck.model()?;
    model.ctx.check_features(&test)?;
    let features: Vec<String> = if a.features.is_empty() {
        importance_features(&test).into_iter().map(|(n, _)| n).collect()
    } else {
        a.features.clone()
    };
    let results = features
        .iter()
        .map(|f| permutation_importance(&model, &test, f, a.reps, a.seed))
        .collect::<ensgraph::Result<Vec<_>>>()?;
    create_out(&a.out)?;
    write_importance(&results, &a.out.join("importance.csv"))?;
    manifest.finish(&a.out)?;
    for (r, n) in results.iter().zip(normalized_importances(&results)) {
        println!("{:<12} {:>10.5} +- {:.5}  ({:.1}%)", r.feature, r.imp_mean, r.imp_std, 100.0 * n);
    }
    Ok(())
}
