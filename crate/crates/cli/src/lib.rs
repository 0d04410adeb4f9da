//! Command-line driver: simulate data, fit models, evaluate labelings and
//! run BIC model selection.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use regimeclust::baselines::{
    fit_mixhmm_constant, fit_regression_mixture, intra_cluster_inertia, kmeans_curves,
    misclassification_rate,
};
use regimeclust::datasets::{
    load_csv, read_labels, read_matrix, save_dataset, save_outputs, write_atomic, OutputBundle,
    Scenario,
};
use regimeclust::mixhmmr::{select_model, InitStrategy, SelectionGrid};
use regimeclust::{fit_em, Constraint, Dataset, Error, ModelConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FIT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "regimeclust", version, about = "Clustering of time series with regime changes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Fit a clustering model to a CSV dataset.
    Fit(FitArgs),
    /// Compare predicted labels against ground truth.
    Evaluate(EvaluateArgs),
    /// Fit a grid of (G, K, p) and rank by BIC.
    Select(SelectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Mixture of HMM polynomial regressions.
    Mixhmmr,
    /// Mixture of polynomial regressions.
    Mixreg,
    /// Mixture of HMMs with constant regime levels.
    Mixhmm,
    Kmeans,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Mixhmmr => "mixhmmr",
            ModelKind::Mixreg => "mixreg",
            ModelKind::Mixhmm => "mixhmm",
            ModelKind::Kmeans => "kmeans",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintArg {
    LeftRight,
    Full,
}

impl From<ConstraintArg> for Constraint {
    fn from(c: ConstraintArg) -> Self {
        match c {
            ConstraintArg::LeftRight => Constraint::LeftRight,
            ConstraintArg::Full => Constraint::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    /// First restart from a k-means partition, the rest random.
    KmeansFirst,
    /// Every restart from a random partition.
    RandomPartition,
}

impl From<InitArg> for InitStrategy {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::KmeansFirst => InitStrategy::KMeansFirst,
            InitArg::RandomPartition => InitStrategy::RandomPartition,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_parser = parse_scenario)]
    #[serde(serialize_with = "display")]
    pub scenario: Scenario,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Options shared by the fitting commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct EmArgs {
    #[arg(long, value_enum)]
    pub constraint: Option<ConstraintArg>,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Number of random restarts.
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, value_enum, default_value_t = InitArg::KmeansFirst)]
    pub init: InitArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 gives bit-for-bit reproducible runs.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub time: Option<PathBuf>,
    /// Ground-truth labels, used for the error rate in report.json.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelKind::Mixhmmr)]
    pub model: ModelKind,
    #[arg(long)]
    pub clusters: usize,
    #[arg(long)]
    pub regimes: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Curves for the intra-cluster inertia; requires --means.
    #[arg(long, requires = "means")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub time: Option<PathBuf>,
    #[arg(long, requires = "input")]
    pub means: Option<PathBuf>,
    /// Directory for evaluation.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub time: Option<PathBuf>,
    #[arg(long)]
    pub gmax: usize,
    #[arg(long)]
    pub kmax: usize,
    #[arg(long, default_value_t = 0)]
    pub pmin: usize,
    #[arg(long)]
    pub pmax: usize,
    /// Refuse grids with more cells than this.
    #[arg(long, default_value_t = 200)]
    pub max_cells: usize,
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse::<Scenario>()
        .map_err(|_| format!("unknown scenario `{s}` (expected piecewise, waveform or switchlike)"))
}

fn display<T: fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Fit(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Fit(_) => EXIT_FIT,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "usage error: {e:#}"),
            CliError::Fit(e) => write!(f, "fit failed: {e:#}"),
        }
    }
}

fn usage(msg: impl fmt::Display) -> CliError {
    CliError::Usage(anyhow::anyhow!("{msg}"))
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Usage(e)
    }
}

/// Classifies an error raised while fitting: numerical breakdowns are fit
/// failures, anything else is a problem with the request.
fn fit_error(e: Error) -> CliError {
    match e {
        Error::FitFailure(_) | Error::DegenerateWeights(_) | Error::ImpossiblePath => {
            CliError::Fit(e.into())
        }
        other => CliError::Usage(other.into()),
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub config: C,
    pub seed: u64,
    pub versions: Versions,
    pub started_unix_s: f64,
    pub wall_clock_s: f64,
    pub degeneracy_events: usize,
    pub outputs: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub regimeclust: &'static str,
    pub parallel: bool,
}

fn versions() -> Versions {
    Versions {
        regimeclust: env!("CARGO_PKG_VERSION"),
        parallel: cfg!(feature = "parallel"),
    }
}

struct Clock {
    start: Instant,
    unix: f64,
}

impl Clock {
    fn start() -> Self {
        Self {
            start: Instant::now(),
            unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0.0, |d| d.as_secs_f64()),
        }
    }
}

fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &str,
    config: C,
    seed: u64,
    clock: &Clock,
    degeneracy_events: usize,
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    let manifest = RunManifest {
        command,
        config,
        seed,
        versions: versions(),
        started_unix_s: clock.unix,
        wall_clock_s: clock.start.elapsed().as_secs_f64(),
        degeneracy_events,
        outputs: outputs
            .iter()
            .map(|p| p.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned()))
            .collect(),
    };
    let body = serde_json::to_string_pretty(&manifest).context("serializing manifest")? + "\n";
    write_atomic(&dir.join("manifest.json"), body.as_bytes()).context("writing manifest")?;
    Ok(())
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    if threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .context("building thread pool")?;
        Ok(pool.install(f))
    }
    #[cfg(not(feature = "parallel"))]
    {
        if threads > 1 {
            log::warn!("built without the `parallel` feature; running on one thread");
        }
        Ok(f())
    }
}

fn load(input: &Path, time: Option<&Path>, labels: Option<&Path>) -> Result<Dataset, CliError> {
    load_csv(input, time, labels).map_err(|e| CliError::Usage(e.into()))
}

fn model_config(em: &EmArgs, clusters: usize, regimes: usize, degree: usize) -> Result<ModelConfig, CliError> {
    let mut config = ModelConfig::new(clusters, regimes, degree)
        .with_seed(em.seed)
        .with_restarts(em.runs)
        .with_constraint(em.constraint.map_or(Constraint::LeftRight, Constraint::from))
        .with_init(em.init.into());
    config.max_iter = em.max_iter;
    config.rel_tol = em.tol;
    config.validate().map_err(|e| CliError::Usage(e.into()))?;
    Ok(config)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let clock = Clock::start();
    let data = args
        .scenario
        .generate(args.n, args.seed)
        .map_err(|e| CliError::Usage(e.into()))?;
    let outputs = save_dataset(&data, &args.out).context("writing dataset")?;
    write_manifest(&args.out, "simulate", args, args.seed, &clock, 0, &outputs)?;
    log::info!("wrote {} curves of length {} to {}", data.n(), data.m(), args.out.display());
    Ok(())
}

/// Flags that make no sense for the chosen model.
fn conflicting_flags(args: &FitArgs) -> Vec<&'static str> {
    let mut bad = Vec::new();
    match args.model {
        ModelKind::Mixhmmr => {}
        ModelKind::Mixhmm => {
            if args.degree.is_some() {
                bad.push("--degree");
            }
        }
        ModelKind::Mixreg => {
            if args.regimes.is_some() {
                bad.push("--regimes");
            }
            if args.em.constraint.is_some() {
                bad.push("--constraint");
            }
        }
        ModelKind::Kmeans => {
            if args.regimes.is_some() {
                bad.push("--regimes");
            }
            if args.degree.is_some() {
                bad.push("--degree");
            }
            if args.em.constraint.is_some() {
                bad.push("--constraint");
            }
        }
    }
    bad
}

pub fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let clock = Clock::start();
    let bad = conflicting_flags(args);
    if !bad.is_empty() {
        return Err(usage(format!(
            "{} cannot be used with --model {}",
            bad.join(", "),
            args.model
        )));
    }
    let needs = |flag: Option<usize>, name: &str| {
        flag.ok_or_else(|| usage(format!("--model {} requires {name}", args.model)))
    };
    let (regimes, degree) = match args.model {
        ModelKind::Mixhmmr => (needs(args.regimes, "--regimes")?, needs(args.degree, "--degree")?),
        ModelKind::Mixhmm => (needs(args.regimes, "--regimes")?, 0),
        ModelKind::Mixreg => (1, needs(args.degree, "--degree")?),
        ModelKind::Kmeans => (1, 0),
    };
    let config = model_config(&args.em, args.clusters, regimes, degree)?;
    let data = load(&args.input, args.time.as_deref(), args.truth.as_deref())?;
    if args.clusters > data.n() {
        return Err(usage(format!(
            "--clusters {} exceeds the number of curves ({})",
            args.clusters,
            data.n()
        )));
    }

    let model = args.model;
    let bundle = with_threads(args.em.threads, || -> Result<OutputBundle, CliError> {
        let bundle = match model {
            ModelKind::Mixhmmr => {
                let fit = fit_em(&data, &config).map_err(fit_error)?;
                OutputBundle::from_fit("mixhmmr", &fit, &data)
            }
            ModelKind::Mixhmm => {
                let fit = fit_mixhmm_constant(&data, config.clusters, config.regimes, &config)
                    .map_err(fit_error)?;
                OutputBundle::from_fit("mixhmm", &fit, &data)
            }
            ModelKind::Mixreg => {
                let fit = fit_regression_mixture(&data, config.clusters, config.degree, &config)
                    .map_err(fit_error)?;
                OutputBundle::from_regmix(&fit, &data)
            }
            ModelKind::Kmeans => {
                let fit = kmeans_curves(&data, config.clusters, &config).map_err(fit_error)?;
                OutputBundle::from_kmeans(&fit, &data)
            }
        };
        bundle.map_err(|e| CliError::Fit(e.into()))
    })??;

    let outputs = save_outputs(&bundle, &args.out).context("writing outputs")?;
    #[derive(Serialize)]
    struct FitEcho<'a> {
        args: &'a FitArgs,
        model: &'a ModelConfig,
    }
    write_manifest(
        &args.out,
        "fit",
        FitEcho { args, model: &config },
        config.seed,
        &clock,
        bundle.report.degeneracy_events,
        &outputs,
    )?;
    let r = &bundle.report;
    match r.misclassification_rate {
        Some(rate) => log::info!("{}: loglik {:?}, error rate {rate}", r.model, r.loglik),
        None => log::info!("{}: loglik {:?}", r.model, r.loglik),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Evaluation {
    pub n: usize,
    pub misclassification_rate: f64,
    pub intra_cluster_inertia: Option<f64>,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Evaluation, CliError> {
    let clock = Clock::start();
    let pred = read_labels(&args.pred).map_err(|e| CliError::Usage(e.into()))?;
    let truth = read_labels(&args.truth).map_err(|e| CliError::Usage(e.into()))?;
    if pred.len() != truth.len() {
        return Err(usage(format!(
            "{} predicted labels but {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    let rate = misclassification_rate(&pred, &truth).map_err(|e| CliError::Usage(e.into()))?;
    let inertia = match (&args.input, &args.means) {
        (Some(input), Some(means)) => {
            let data = load(input, args.time.as_deref(), None)?;
            let means = read_matrix(means).map_err(|e| CliError::Usage(e.into()))?;
            Some(intra_cluster_inertia(&data, &pred, &means).map_err(|e| CliError::Usage(e.into()))?)
        }
        _ => None,
    };
    let eval = Evaluation {
        n: pred.len(),
        misclassification_rate: rate,
        intra_cluster_inertia: inertia,
    };
    let body = serde_json::to_string_pretty(&eval).context("serializing evaluation")? + "\n";
    print!("{body}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("evaluation.json");
        write_atomic(&path, body.as_bytes()).context("writing evaluation")?;
        write_manifest(dir, "evaluate", args, 0, &clock, 0, &[path])?;
    }
    Ok(eval)
}

pub fn cmd_select(args: &SelectArgs) -> Result<(), CliError> {
    let clock = Clock::start();
    let grid = SelectionGrid {
        g_max: args.gmax,
        k_max: args.kmax,
        p_min: args.pmin,
        p_max: args.pmax,
        max_cells: args.max_cells,
    };
    if args.gmax == 0 || args.kmax == 0 || args.pmin > args.pmax {
        return Err(usage("--gmax and --kmax must be at least 1 and --pmin at most --pmax"));
    }
    if grid.cells() > grid.max_cells {
        return Err(usage(format!(
            "the grid has {} cells, more than --max-cells {}; narrow --gmax, --kmax or the degree range",
            grid.cells(),
            grid.max_cells
        )));
    }
    let base = model_config(&args.em, 1, 1, args.pmin)?;
    let data = load(&args.input, args.time.as_deref(), None)?;
    let rows = with_threads(args.em.threads, || select_model(&data, &grid, &base))?
        .map_err(fit_error)?;

    let mut body = String::from("G,K,p,loglik,nu,nu_exact,bic,bic_exact,best\n");
    for r in &rows {
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.clusters,
            r.regimes,
            r.degree,
            r.loglik,
            r.nu,
            r.nu_exact,
            r.bic,
            r.bic_exact,
            u8::from(r.best)
        ));
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let path = args.out.join("selection.csv");
    write_atomic(&path, body.as_bytes()).context("writing selection table")?;
    write_manifest(&args.out, "select", args, args.em.seed, &clock, 0, &[path])?;
    if let Some(best) = rows.iter().find(|r| r.best) {
        log::info!("best: G={} K={} p={} BIC={}", best.clusters, best.regimes, best.degree, best.bic);
    }
    Ok(())
}

pub fn init_logging() {
    let env = env_logger::Env::default().filter_or("REGIMECLUST_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| ()),
        Command::Select(a) => cmd_select(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("regimeclust: {e}");
            e.exit_code()
        }
    }
}
