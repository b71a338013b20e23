//! Command-line driver.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 when the command
//! line or the config file is invalid.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, GraphSource};
use crate::error::{Error, Result};
use crate::graph::{homophily_ratio, Graph};
use crate::model::Branches;
use crate::rng::{stream_rng, Stream};
use crate::spectral::{
    esc, esc_anch, median_pairwise_distance, sc_dense_with_limit, AnchorSet, SpectralFeatures, SpectralMethod,
    DENSE_NODE_LIMIT,
};
use crate::structure::build_reconnected;
use crate::train::{
    evaluate, prepare_with_spectral, run_experiment_with_spectral, spectral_features, ExperimentOutcome,
    HyperParams, TrainReport,
};

/// Environment variable naming the spectral feature cache directory.
pub const CACHE_ENV: &str = "HETERO_GNN_CACHE";

#[derive(Debug, Parser)]
#[command(name = "hetero-gnn", version, about = "Node classification on heterophilous graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train for `runs` seeds and write summary.json plus per-run logs.
    Train(CommonArgs),
    /// Score a saved checkpoint on its test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time the three spectral feature routines.
    SpectralBench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Node counts for a sweep over random non-negative matrices.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Feature width of the sweep matrices.
        #[arg(long, default_value_t = 500)]
        dim: usize,
        /// Anchor count for the sweep.
        #[arg(long, default_value_t = 400)]
        anchors: usize,
        /// Spectral feature width for the sweep.
        #[arg(long, default_value_t = 15)]
        width: usize,
        /// Largest graph handed to the dense routine.
        #[arg(long, default_value_t = DENSE_NODE_LIMIT)]
        dense_limit: usize,
    },
    /// Homophily of the input graph and, with a checkpoint, of the learned graph.
    Homophily {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the learned support as `i,j,similarity` rows.
        #[arg(long)]
        support_csv: Option<PathBuf>,
    },
    /// Compare no aggregation, input graph only, and input plus learned graph.
    Ablate(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Benchmark name; replaces the config's graph source.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_command<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(Error::Config(msg)) => {
            eprintln!("config error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Train(common) => train(common),
        Command::Eval { common, checkpoint } => eval(common, checkpoint),
        Command::SpectralBench {
            config,
            dataset,
            data_dir,
            out,
            seed,
            sizes,
            dim,
            anchors,
            width,
            dense_limit,
        } => {
            let bench = BenchArgs {
                sizes: sizes.clone(),
                dim: *dim,
                anchors: *anchors,
                width: *width,
                dense_limit: *dense_limit,
                seed: seed.unwrap_or(0),
            };
            let source = match config {
                Some(path) => {
                    let common = CommonArgs {
                        config: path.clone(),
                        dataset: dataset.clone(),
                        data_dir: data_dir.clone(),
                        out: out.clone(),
                        runs: None,
                        seed: *seed,
                    };
                    Some(load_config(&common)?)
                }
                None if bench.sizes.is_empty() => {
                    return Err(Error::Config("spectral-bench needs --config or --sizes".into()))
                }
                None => None,
            };
            spectral_bench(source.as_ref(), &bench, out)
        }
        Command::Homophily {
            common,
            checkpoint,
            support_csv,
        } => homophily(common, checkpoint.as_deref(), support_csv.as_deref()),
        Command::Ablate(common) => ablate(common),
    }
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(name) = &common.dataset {
        cfg.dataset = Some(name.clone());
        cfg.node_file = None;
        cfg.edge_file = None;
        cfg.synth_n = None;
        cfg.synth_classes = None;
        cfg.synth_d = None;
        cfg.synth_h = None;
        cfg.synth_noise = None;
        cfg.synth_seed = None;
    }
    if let Some(dir) = &common.data_dir {
        cfg.data_dir = Some(dir.clone());
    }
    if let Some(runs) = common.runs {
        cfg.runs = runs;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    Ok(w)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Validation(format!("{other:?}")),
    }
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Spectral features, read from `$HETERO_GNN_CACHE` when a matching entry
/// exists. Returns the features and the seconds spent computing them.
pub fn cached_spectral(name: &str, graph: &Graph, hyper: &HyperParams) -> Result<(SpectralFeatures, f64)> {
    let cache_dir = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    let path = cache_dir.as_ref().map(|dir| dir.join(format!("{}.spectral", cache_key(name, graph, hyper))));
    if let Some(path) = &path {
        if let Ok(text) = fs::read_to_string(path) {
            match parse_spectral(&text, hyper.spectral) {
                Ok(sf) if sf.f.nrows() == graph.n_nodes() => {
                    log::info!("spectral features from cache {}", path.display());
                    return Ok((sf, 0.0));
                }
                _ => log::warn!("ignoring unreadable cache entry {}", path.display()),
            }
        }
    }
    let start = Instant::now();
    let sf = spectral_features(graph.features().view(), hyper)?;
    let seconds = start.elapsed().as_secs_f64();
    if let (Some(dir), Some(path)) = (&cache_dir, &path) {
        create_dir(dir)?;
        fs::write(path, format_spectral(&sf))?;
    }
    Ok((sf, seconds))
}

fn cache_key(name: &str, graph: &Graph, hyper: &HyperParams) -> String {
    let mut hasher = Sha256::new();
    let header = format!(
        "{name}|{}|{}|{}|{}|{}|{}",
        hyper.spectral.as_str(),
        hyper.m,
        hyper.c,
        hyper.seed,
        graph.n_nodes(),
        graph.n_features()
    );
    hasher.update(header.as_bytes());
    for v in graph.features().iter() {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

fn format_spectral(sf: &SpectralFeatures) -> String {
    let join = |it: &mut dyn Iterator<Item = &f64>| it.map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
    format!(
        "{} {}\n{}\n{}\n",
        sf.f.nrows(),
        sf.f.ncols(),
        join(&mut sf.eigenvalues.iter()),
        join(&mut sf.f.iter())
    )
}

fn parse_spectral(text: &str, method: SpectralMethod) -> Result<SpectralFeatures> {
    let bad = || Error::Validation("malformed spectral cache entry".into());
    let mut lines = text.lines();
    let dims: Vec<usize> = lines
        .next()
        .ok_or_else(bad)?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [n, c] = dims[..] else { return Err(bad()) };
    let parse = |line: Option<&str>| -> Result<Vec<f64>> {
        line.ok_or_else(bad)?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad()))
            .collect()
    };
    let eigenvalues = parse(lines.next())?;
    let values = parse(lines.next())?;
    if eigenvalues.len() != c {
        return Err(bad());
    }
    let f = Array2::from_shape_vec((n, c), values).map_err(|_| bad())?;
    Ok(SpectralFeatures { f, eigenvalues, method })
}

#[derive(Serialize)]
struct TrainSummaryFile<'a> {
    dataset: String,
    nodes: usize,
    edges: usize,
    acc_mean: f64,
    acc_std: f64,
    hyper: &'a HyperParams,
    runs: &'a [TrainReport],
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    finished_unix_seconds: u64,
    spectral_seconds: f64,
    run_seconds: &'a [f64],
}

fn train(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let source = cfg.graph_source()?;
    let graph = source.load()?;
    let hyper = cfg.hyper();
    let (spectral, spectral_seconds) = cached_spectral(&source.name(), &graph, &hyper)?;
    let outcome = run_experiment_with_spectral(&graph, &hyper, cfg.runs, spectral, spectral_seconds)?;
    write_train_artifacts(&common.out, &source, &graph, &outcome)?;
    println!(
        "{}: acc_mean = {:.4}, acc_std = {:.4} over {} runs",
        source.name(),
        outcome.summary.acc_mean,
        outcome.summary.acc_std,
        outcome.summary.runs.len()
    );
    Ok(())
}

fn write_train_artifacts(out: &Path, source: &GraphSource, graph: &Graph, outcome: &ExperimentOutcome) -> Result<()> {
    let summary = &outcome.summary;
    let runs_dir = out.join("runs");
    let ckpt_dir = out.join("checkpoints");
    create_dir(&runs_dir)?;
    create_dir(&ckpt_dir)?;
    write_json(
        &out.join("summary.json"),
        &TrainSummaryFile {
            dataset: source.name(),
            nodes: graph.n_nodes(),
            edges: graph.n_edges(),
            acc_mean: summary.acc_mean,
            acc_std: summary.acc_std,
            hyper: &summary.hyper,
            runs: &summary.runs,
        },
    )?;

    let mut table = csv_writer(
        &out.join("runs.csv"),
        &["seed", "best_epoch", "epochs_run", "best_val_loss", "test_acc"],
    )?;
    for (report, model) in summary.runs.iter().zip(&outcome.models) {
        table
            .write_record([
                report.run_seed.to_string(),
                report.best_epoch.to_string(),
                report.epochs_run().to_string(),
                report.best_val_loss.to_string(),
                report.test_acc.to_string(),
            ])
            .map_err(csv_err)?;
        let mut log = csv_writer(
            &runs_dir.join(format!("run_{}.csv", report.run_seed)),
            &["epoch", "train_loss", "train_acc", "val_loss", "val_acc"],
        )?;
        for e in 0..report.epochs_run() {
            log.write_record([
                e.to_string(),
                report.train_loss[e].to_string(),
                report.train_acc[e].to_string(),
                report.val_loss[e].to_string(),
                report.val_acc[e].to_string(),
            ])
            .map_err(csv_err)?;
        }
        log.flush()?;
        Checkpoint::from_model(&summary.hyper, model).save(&ckpt_dir.join(format!("run_{}.ckpt", report.run_seed)))?;
    }
    table.flush()?;
    write_json(
        &out.join("metadata.json"),
        &Metadata {
            command: "train",
            finished_unix_seconds: unix_seconds(),
            spectral_seconds: outcome.timings.spectral_seconds,
            run_seconds: &outcome.timings.run_seconds,
        },
    )
}

#[derive(Serialize)]
struct EvalReport {
    dataset: String,
    run_seed: u64,
    train_acc: f64,
    val_acc: f64,
    val_loss: f64,
    test_acc: f64,
}

fn eval(common: &CommonArgs, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let source = cfg.graph_source()?;
    let graph = source.load()?;
    let ck = Checkpoint::load(checkpoint)?;
    let hyper = ck.hyper.clone();
    let (spectral, _) = cached_spectral(&source.name(), &graph, &hyper)?;
    let prep = prepare_with_spectral(&graph, &hyper, spectral)?;
    let model = ck.into_model(&prep)?;
    let result = evaluate(&prep, &model.head, &model.params, &model.support, &model.split, hyper.branches)?;
    let report = EvalReport {
        dataset: source.name(),
        run_seed: model.run_seed,
        train_acc: result.train_acc,
        val_acc: result.val_acc,
        val_loss: result.val_loss,
        test_acc: result.test_acc,
    };
    create_dir(&common.out)?;
    write_json(&common.out.join("eval.json"), &report)?;
    println!("{}: test accuracy {:.4} (seed {})", report.dataset, report.test_acc, report.run_seed);
    Ok(())
}

fn fmt_ratio(h: Result<f64>) -> Result<String> {
    match h {
        Ok(v) => Ok(v.to_string()),
        Err(Error::UndefinedRatio) => Ok(String::new()),
        Err(e) => Err(e),
    }
}

fn homophily(common: &CommonArgs, checkpoint: Option<&Path>, support_csv: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let source = cfg.graph_source()?;
    let graph = source.load()?;
    create_dir(&common.out)?;
    let mut table = csv_writer(&common.out.join("homophily.csv"), &["dataset", "graph", "nodes", "edges", "h"])?;
    let name = source.name();
    let h = fmt_ratio(homophily_ratio(&graph))?;
    println!("{name}: h = {}", if h.is_empty() { "undefined" } else { &h });
    table
        .write_record([
            name.as_str(),
            "original",
            &graph.n_nodes().to_string(),
            &graph.n_edges().to_string(),
            &h,
        ])
        .map_err(csv_err)?;

    if let Some(path) = checkpoint {
        let ck = Checkpoint::load(path)?;
        let hyper = ck.hyper.clone();
        let (spectral, _) = cached_spectral(&name, &graph, &hyper)?;
        let prep = prepare_with_spectral(&graph, &hyper, spectral)?;
        let rec = build_reconnected(prep.x_aug.view(), &ck.head)?;
        let h_star = fmt_ratio(rec.homophily(graph.labels()))?;
        println!("{name}: learned graph h = {}", if h_star.is_empty() { "undefined" } else { &h_star });
        table
            .write_record([
                name.as_str(),
                "reconnected",
                &graph.n_nodes().to_string(),
                &rec.off_diagonal_edges().to_string(),
                &h_star,
            ])
            .map_err(csv_err)?;
        if let Some(csv_path) = support_csv {
            let mut w = csv_writer(csv_path, &["i", "j", "similarity"])?;
            for (i, j, v) in rec.a_star.iter() {
                w.write_record([i.to_string(), j.to_string(), v.to_string()]).map_err(csv_err)?;
            }
            w.flush()?;
        }
    }
    table.flush()?;
    Ok(())
}

fn ablate(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let source = cfg.graph_source()?;
    let graph = source.load()?;
    let base = cfg.hyper();
    let (spectral, _) = cached_spectral(&source.name(), &graph, &base)?;
    create_dir(&common.out)?;
    let mut table = csv_writer(
        &common.out.join("ablation.csv"),
        &["dataset", "A", "A_star", "K", "eps", "acc_mean", "acc_std"],
    )?;
    for (adjacency, reconnected) in [(false, false), (true, false), (true, true)] {
        let hyper = HyperParams {
            branches: Branches { adjacency, reconnected },
            ..base.clone()
        };
        let outcome = run_experiment_with_spectral(&graph, &hyper, cfg.runs, spectral.clone(), 0.0)?;
        let s = &outcome.summary;
        println!(
            "{}: A = {adjacency}, A_star = {reconnected}: acc_mean = {:.4}, acc_std = {:.4}",
            source.name(),
            s.acc_mean,
            s.acc_std
        );
        table
            .write_record([
                source.name(),
                u8::from(adjacency).to_string(),
                u8::from(reconnected).to_string(),
                hyper.k.to_string(),
                hyper.eps.to_string(),
                s.acc_mean.to_string(),
                s.acc_std.to_string(),
            ])
            .map_err(csv_err)?;
    }
    table.flush()?;
    Ok(())
}

struct BenchArgs {
    sizes: Vec<usize>,
    dim: usize,
    anchors: usize,
    width: usize,
    dense_limit: usize,
    seed: u64,
}

/// One timed spectral routine.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: SpectralMethod,
    /// `None` when the routine declined the input.
    pub seconds: Option<f64>,
    pub note: String,
}

/// Times the dense, inner-product and anchor routines on `x`.
pub fn bench_matrix(x: ndarray::ArrayView2<'_, f64>, m: usize, c: usize, seed: u64, dense_limit: usize) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    let mut time = |method: SpectralMethod, f: &mut dyn FnMut() -> Result<SpectralFeatures>| {
        let start = Instant::now();
        let outcome = f();
        let seconds = start.elapsed().as_secs_f64();
        rows.push(match outcome {
            Ok(_) => BenchRow {
                method,
                seconds: Some(seconds),
                note: String::new(),
            },
            Err(e) => BenchRow {
                method,
                seconds: None,
                note: e.to_string(),
            },
        });
    };
    time(SpectralMethod::ScDense, &mut || {
        if x.nrows() > dense_limit {
            return Err(Error::TooLarge {
                n: x.nrows(),
                limit: dense_limit,
            });
        }
        let sigma = median_pairwise_distance(x);
        sc_dense_with_limit(x, c, sigma, dense_limit)
    });
    time(SpectralMethod::Esc, &mut || esc(x, c));
    time(SpectralMethod::EscAnch, &mut || {
        let anchors = AnchorSet::sample(x.nrows(), m.min(x.nrows()), seed)?;
        esc_anch(x, &anchors, c)
    });
    rows
}

/// Uniform `[0, 1)` matrix from the synthetic stream.
pub fn random_nonnegative(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, Stream::Synthetic);
    Array2::from_shape_fn((n, d), |_| rng.random::<f64>())
}

fn spectral_bench(cfg: Option<&ExperimentConfig>, bench: &BenchArgs, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut table = csv_writer(
        &out.join("spectral_bench.csv"),
        &["dataset", "n", "d", "m", "c", "method", "seconds", "speedup", "note"],
    )?;
    let mut cases: Vec<(String, Array2<f64>, usize, usize, u64)> = Vec::new();
    if let Some(cfg) = cfg {
        let source = cfg.graph_source()?;
        let graph = source.load()?;
        cases.push((source.name(), graph.features().clone(), cfg.m, cfg.c, cfg.seed));
    }
    for &n in &bench.sizes {
        cases.push((
            format!("random-n{n}"),
            random_nonnegative(n, bench.dim, bench.seed),
            bench.anchors,
            bench.width,
            bench.seed,
        ));
    }
    for (name, x, m, c, seed) in cases {
        let rows = bench_matrix(x.view(), m, c, seed, bench.dense_limit);
        let dense = rows.iter().find(|r| r.method == SpectralMethod::ScDense).and_then(|r| r.seconds);
        for row in rows {
            let speedup = match (dense, row.seconds) {
                (Some(d), Some(s)) if s > 0.0 => (d / s).to_string(),
                _ => String::new(),
            };
            let seconds = row.seconds.map(|s| s.to_string()).unwrap_or_default();
            println!("{name}: {} {}", row.method.as_str(), if seconds.is_empty() { &row.note } else { &seconds });
            table
                .write_record([
                    name.clone(),
                    x.nrows().to_string(),
                    x.ncols().to_string(),
                    m.to_string(),
                    c.to_string(),
                    row.method.as_str().to_string(),
                    seconds,
                    speedup,
                    row.note,
                ])
                .map_err(csv_err)?;
        }
    }
    table.flush()?;
    write_json(
        &out.join("metadata.json"),
        &Metadata {
            command: "spectral-bench",
            finished_unix_seconds: unix_seconds(),
            spectral_seconds: 0.0,
            run_seconds: &[],
        },
    )
}
