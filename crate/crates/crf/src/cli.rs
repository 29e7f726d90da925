//! Command-line surface: `train`, `predict`, `ci`, `simulate` and `bench`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use crf_core::{ClusteredForest, CovariateShiftSpec, ForestConfig, WeightClass};

use crate::bench;
use crate::config::{ConfigError, ConfigFile};
use crate::io::{load_dataset, load_rows, write_intervals, write_predictions};
use crate::model::{dump_trees, load_model, save_model};
use crate::simulation::{
    coverage_experiment, shift_experiment, theorem2_experiment, DgpKind, DgpSpec, ForestEstimator,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "crf", version, about = "Clustered random forests for grouped data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a forest on grouped CSV data and save it as JSON.
    Train(TrainArgs),
    /// Point predictions at query rows.
    Predict(PredictArgs),
    /// Point predictions with little-bags confidence intervals.
    Ci(PredictArgs),
    /// Replicated simulation study.
    Simulate(SimulateArgs),
    /// Timing ladder for the weighted leaf fit.
    Bench(BenchArgs),
}

/// Forest settings shared by the fitting subcommands. Values given here
/// override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ForestArgs {
    /// Flat JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long = "weight-class")]
    pub weight_class: Option<String>,
    /// q_shift, train, moment or fixed.
    #[arg(long = "rho-strategy")]
    pub rho_strategy: Option<String>,
    #[arg(long = "rho-fixed", allow_negative_numbers = true)]
    pub rho_fixed: Option<f64>,
    /// Minimum node size.
    #[arg(long)]
    pub k: Option<usize>,
    /// Trees per little bag.
    #[arg(long = "B")]
    pub trees_per_bag: Option<usize>,
    /// Number of little bags.
    #[arg(long = "R")]
    pub bags: Option<usize>,
    /// Subsample rate: s_I = floor(I^beta / 3).
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "s-corr")]
    pub s_corr: Option<usize>,
    #[arg(long = "alpha-ci")]
    pub alpha_ci: Option<f64>,
}

impl ForestArgs {
    fn overrides(&self, seed: Option<u64>) -> ConfigFile {
        ConfigFile {
            weight_class: self.weight_class.clone(),
            rho_strategy: self.rho_strategy.clone(),
            rho_fixed: self.rho_fixed,
            k: self.k,
            trees_per_bag: self.trees_per_bag,
            bags: self.bags,
            beta: self.beta,
            s_corr: self.s_corr,
            alpha_ci: self.alpha_ci,
            seed,
            ..ConfigFile::default()
        }
    }

    /// Config file overlaid with the flags.
    pub fn merged(&self, seed: Option<u64>) -> Result<ConfigFile, CliError> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p).map_err(CliError::from_config)?,
            None => ConfigFile::default(),
        };
        file.overlay(&self.overrides(seed)).map_err(CliError::from_config)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// CSV with header cluster_id,y,x1,...,xd.
    #[arg(long)]
    pub data: PathBuf,
    /// Model JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Target covariate distribution: point:x1,..,xd | box:lo1:hi1,... | file:path | training.
    #[arg(long, default_value = "training")]
    pub shift: String,
    #[arg(long)]
    pub seed: u64,
    /// Also write the partitions as nested JSON.
    #[arg(long = "dump-trees")]
    pub dump_trees: Option<PathBuf>,
    #[command(flatten)]
    pub forest: ForestArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV of covariate rows, header optional.
    #[arg(long)]
    pub query: PathBuf,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "alpha-ci")]
    pub alpha_ci: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// intro_2d, shift_equicorr, ar2_inference or theorem2.
    #[arg(long)]
    pub dgp: String,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Target point for interval experiments, comma separated; all ones by default.
    #[arg(long, allow_hyphen_values = true)]
    pub target: Option<String>,
    /// Shifted target distribution for `shift_equicorr`; box:1:2 by default.
    #[arg(long)]
    pub shift: Option<String>,
    #[arg(long)]
    pub seed: u64,
    /// Report JSON; per-replication rows go next to it as .reps.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub forest: ForestArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub seed: u64,
    /// Timing CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub forest: ForestArgs,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    fn from_config(e: ConfigError) -> Self {
        match e {
            ConfigError::Conflict(m) => CliError::Usage(m),
            other => CliError::Runtime(other.into()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.into())
            }
        })*
    };
}

runtime_from!(
    crate::io::DataError,
    crate::model::ModelError,
    crf_core::Error,
    serde_json::Error,
    io::Error,
    rayon::ThreadPoolBuildError
);

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn numbers(list: &str, what: &str) -> Result<Vec<f64>, CliError> {
    list.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("{what}: cannot parse {t:?} as a number"))))
        .collect()
}

/// Parses `point:…`, `box:lo:hi,…`, `file:path` or `training`.
pub fn parse_shift(s: &str) -> Result<CovariateShiftSpec, CliError> {
    if s == "training" {
        return Ok(CovariateShiftSpec::Training);
    }
    let (kind, rest) = s.split_once(':').ok_or_else(|| usage(format!("--shift {s:?}: expected kind:values")))?;
    match kind {
        "point" => Ok(CovariateShiftSpec::PointMass { x: numbers(rest, "--shift point")? }),
        "box" => {
            let mut lo = Vec::new();
            let mut hi = Vec::new();
            for side in rest.split(',') {
                let (a, b) =
                    side.split_once(':').ok_or_else(|| usage(format!("--shift box: side {side:?} is not lo:hi")))?;
                let v = numbers(&format!("{a},{b}"), "--shift box")?;
                lo.push(v[0]);
                hi.push(v[1]);
            }
            Ok(CovariateShiftSpec::UniformBox { lo, hi })
        }
        "file" => {
            let (rows, dim) = load_rows(Path::new(rest), None).with_context(|| format!("reading --shift {rest}"))?;
            Ok(CovariateShiftSpec::Empirical { rows, dim })
        }
        other => Err(usage(format!("--shift: unknown kind {other:?}"))),
    }
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn forest_config(merged: &ConfigFile) -> Result<ForestConfig, CliError> {
    merged.forest_config().map_err(CliError::from_config)
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError> {
    match threads {
        None => f(),
        Some(0) => Err(usage("--threads must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            pool.install(f)
        }
    }
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = forest_config(&a.forest.merged(Some(a.seed))?)?;
    let shift = parse_shift(&a.shift)?;
    let data = load_dataset(&a.data, None)?;
    let forest = ClusteredForest::fit(&data, &cfg, &shift)?;
    save_model(&a.out, &forest)?;
    if let Some(p) = &a.dump_trees {
        let text = serde_json::to_string_pretty(&dump_trees(&forest))?;
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    let n_trees = forest.trees().count();
    eprintln!("fit {n_trees} trees on {} clusters ({} observations)", data.n_clusters(), data.n_obs());
    Ok(())
}

fn predict(a: &PredictArgs, intervals: bool) -> Result<(), CliError> {
    let forest = load_model(&a.model)?;
    let (rows, d) = load_rows(&a.query, Some(forest.dim))?;
    let mut out = output(a.out.as_deref())?;
    if intervals {
        let alpha = a.alpha_ci.unwrap_or(forest.config.alpha_ci);
        let est = rows
            .chunks_exact(d)
            .map(|x| forest.confidence_interval(x, alpha))
            .collect::<Result<Vec<_>, _>>()
            ?;
        write_intervals(&mut out, &rows, d, &est)?;
    } else {
        let mu = rows
            .chunks_exact(d)
            .map(|x| forest.predict(x).map(|p| p.mu_hat))
            .collect::<Result<Vec<_>, _>>()
            ?;
        write_predictions(&mut out, &rows, d, &mu)?;
    }
    out.flush()?;
    Ok(())
}

fn default_clusters(kind: DgpKind) -> usize {
    match kind {
        DgpKind::Intro2d => 10_000,
        DgpKind::ShiftEquicorr => 2_000,
        DgpKind::Ar2Inference => 500,
        DgpKind::Theorem2 => 3_000,
    }
}

fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let kind = DgpKind::parse(&a.dgp).ok_or_else(|| usage(format!("--dgp: unknown DGP {:?}", a.dgp)))?;
    if a.reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    let merged = a.forest.merged(Some(a.seed))?;
    let mut cfg = forest_config(&merged)?;
    if kind == DgpKind::Ar2Inference && merged.weight_class.is_none() {
        cfg.weight_class = WeightClass::Ar1;
    }
    let spec = DgpSpec::new(kind, merged.n_clusters.unwrap_or(default_clusters(kind)));
    let report = match kind {
        DgpKind::Ar2Inference | DgpKind::Intro2d => {
            let target = match &a.target {
                Some(t) => numbers(t, "--target")?,
                None => vec![1.0; spec.dim],
            };
            if target.len() != spec.dim {
                return Err(usage(format!("--target has {} coordinates, {} needs {}", target.len(), a.dgp, spec.dim)));
            }
            let est = ForestEstimator::rf_vs_crf(cfg.clone(), &target);
            coverage_experiment(&spec, &est, &cfg, &target, a.reps, a.seed)?
        }
        DgpKind::ShiftEquicorr => {
            let q = parse_shift(a.shift.as_deref().unwrap_or("box:1:2"))?;
            shift_experiment(&spec, &cfg, &q, a.reps, merged.n_eval.unwrap_or(1000), a.seed)?
        }
        DgpKind::Theorem2 => theorem2_experiment(&spec, &cfg, a.reps, a.seed)?,
    };
    let csv = report.save(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&report.methods)?);
    eprintln!("wrote {} and {}", a.out.display(), csv.display());
    Ok(())
}

fn run_bench(a: &BenchArgs) -> Result<(), CliError> {
    let merged = a.forest.merged(Some(a.seed))?;
    let cfg = forest_config(&merged)?;
    let rho = merged.rho_fixed.unwrap_or(0.5);
    let rows = bench::run_ladder(&bench::LADDER, &cfg, rho, 5, a.seed)?;
    let mut out = output(a.out.as_deref())?;
    bench::write_rows(&mut out, &rows)?;
    out.flush()?;
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => with_threads(a.forest.threads, || train(a)),
        Command::Predict(a) => with_threads(a.threads, || predict(a, false)),
        Command::Ci(a) => with_threads(a.threads, || predict(a, true)),
        Command::Simulate(a) => with_threads(a.forest.threads, || simulate(a)),
        Command::Bench(a) => with_threads(a.forest.threads, || run_bench(a)),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}
