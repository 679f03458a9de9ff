//! The `p3s` command line: ingest, split, synth, train, evaluate,
//! grid-search and report.
//!
//! Failures print one line, `error[<category>]: <message>`, to stderr and
//! return a nonzero exit code: 2 for usage errors, 1 for everything else.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use p3s_core::interactions::{build_log, enforce_click_closure, filter_users};
use p3s_core::latent_model::{HyperParams, Method};
use p3s_core::metrics::{evaluate, format_table, EvalReport, MetricMeans, DEFAULT_CUTOFF};
use p3s_core::pipeline::{
    generate_synthetic, load_checkpoint, load_dataset, read_event_source, read_recsys2015, save_checkpoint,
    save_dataset, split_with_stats, write_atomic, SplitConfig, SynthConfig, EVENTS_FILE,
};
use p3s_core::trainer::{
    grid_search, grid_tsv, train, train_parallel, GridCell, GridSpec, SamplesPerEpoch, SamplingMode, TrainConfig,
};
use p3s_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable holding the log filter (`error`, `warn`, `info`, `debug`).
pub const LOG_ENV: &str = "P3S_LOG";

#[derive(Parser, Debug)]
#[command(name = "p3s", version, about = "Pairwise ranking from purchases and clicks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse an event log, add missing clicks for purchases, and drop light users.
    Ingest(IngestArgs),
    /// Split an event log chronologically into training events and held-out purchases.
    Split(SplitArgs),
    /// Generate a synthetic event log from planted latent factors.
    Synth(SynthArgs),
    /// Fit a model on a split dataset and write a checkpoint.
    Train(TrainArgs),
    /// Rank each user's non-clicked items and score the held-out purchases.
    Evaluate(EvaluateArgs),
    /// Train every (K, eta, lambda) cell over several seeds and pick the best by mean AUC.
    GridSearch(GridArgs),
    /// Print evaluation reports side by side as a metric table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Event file: user, item, timestamp, click|purchase (tab separated).
    #[arg(
        long,
        value_name = "FILE",
        required_unless_present = "recsys_clicks",
        conflicts_with = "recsys_clicks"
    )]
    events: Option<PathBuf>,
    /// RecSys Challenge 2015 clicks file (session,timestamp,item,...).
    #[arg(long, value_name = "FILE", requires = "recsys_buys")]
    recsys_clicks: Option<PathBuf>,
    /// RecSys Challenge 2015 buys file (session,timestamp,item,...).
    #[arg(long, value_name = "FILE", requires = "recsys_clicks")]
    recsys_buys: Option<PathBuf>,
    /// Keep users with at least this many distinct purchased items.
    #[arg(long, default_value_t = 8)]
    min_purchases: usize,
    /// Keep users with at least this many distinct clicked items.
    #[arg(long, default_value_t = 10)]
    min_clicks: usize,
    /// Output directory; receives events.tsv.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Event file, or a directory holding events.tsv.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Share of each user's purchases, oldest first, used for training.
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 300)]
    items: usize,
    /// Dimension of the planted factors.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Distinct clicked items per user.
    #[arg(long, default_value_t = 30)]
    clicks: usize,
    /// Distinct purchased items per user, drawn from the clicked ones.
    #[arg(long, default_value_t = 6)]
    buys: usize,
    /// Selection temperature; smaller follows the planted scores more closely.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output event file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Stochastic,
    FullBatch,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `split`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// One of mostpop, wmf, bpr, p3s1, p3s2, p3s3.
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// Latent dimension.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Learning rate [default: 0.05]. Ignored by wmf and mostpop.
    #[arg(long)]
    eta: Option<f64>,
    /// Regularization weight.
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    /// Passes over the data; one ALS sweep per epoch for wmf.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ascent steps per epoch: `auto` (pair count, capped at 1e6) or a number.
    #[arg(long, default_value = "auto", value_parser = parse_samples)]
    samples_per_epoch: SamplesPerEpoch,
    #[arg(long, value_enum, default_value_t = ModeArg::Stochastic)]
    mode: ModeArg,
    /// Confidence scale for wmf: c = 1 + alpha * r.
    #[arg(long, default_value_t = 40.0)]
    wmf_alpha: f64,
    /// Log progress every N epochs (visible with P3S_LOG=info); 0 disables.
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    /// Threads for lock-free parallel ascent; results are not reproducible above 1.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output checkpoint file.
    #[arg(long, value_name = "MODEL")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Dataset directory written by `split`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "MODEL")]
    model: PathBuf,
    /// Rank cutoff for precision and recall.
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: usize,
    /// Output JSON report.
    #[arg(long, value_name = "FILE")]
    report: PathBuf,
    /// Include per-user metrics in the report.
    #[arg(long)]
    per_user: bool,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Dataset directory the models are trained on.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Dataset directory used for scoring; must share user and item ids [default: --data].
    #[arg(long, value_name = "DIR")]
    holdout: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// TOML file with `k`, `eta` and `lambda` arrays. Missing keys keep the
    /// defaults: k = 10..=200 step 10, eta and lambda in {0.01, 0.05, 0.1}.
    #[arg(long, value_name = "FILE")]
    grid: Option<PathBuf>,
    /// Training runs per cell.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// First seed; run j of a cell uses base-seed + j.
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: usize,
    #[arg(long, default_value = "auto", value_parser = parse_samples)]
    samples_per_epoch: SamplesPerEpoch,
    #[arg(long, default_value_t = 40.0)]
    wmf_alpha: f64,
    /// Worker threads [default: all cores].
    #[arg(long)]
    jobs: Option<usize>,
    /// Output JSON report with every cell and the selected setting.
    #[arg(long, value_name = "FILE")]
    report: PathBuf,
    /// Also write the cell table as TSV.
    #[arg(long, value_name = "FILE")]
    tsv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Evaluation or grid-search reports; each becomes one column named after its file.
    #[arg(long = "in", value_name = "FILE", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    k: Option<Vec<usize>>,
    eta: Option<Vec<f64>>,
    lambda: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridReport {
    method: Method,
    cutoff: usize,
    best: HyperParams,
    best_mean: MetricMeans,
    cells: Vec<GridCell>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn parse_samples(s: &str) -> std::result::Result<SamplesPerEpoch, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(SamplesPerEpoch::Auto);
    }
    match s.parse::<u64>() {
        Ok(0) | Err(_) => Err(format!("expected `auto` or a positive integer, got `{s}`")),
        Ok(n) => Ok(SamplesPerEpoch::Fixed(n)),
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprintln!("error[usage]: missing subcommand; see `p3s --help`");
                return 2;
            }
            let text = e.to_string();
            let message: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty() && !l.starts_with("tip:") && !l.starts_with("For more information"))
                .collect();
            eprintln!("error[usage]: {}", message.join(" ").trim_start_matches("error: "));
            return 2;
        }
    };
    init_logging();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::GridSearch(a) => grid_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn ingest(a: IngestArgs) -> Result<()> {
    let raw = match (&a.events, &a.recsys_clicks, &a.recsys_buys) {
        (Some(events), _, _) => read_event_source(events)?,
        (None, Some(clicks), Some(buys)) => read_recsys2015(clicks, buys)?,
        _ => {
            return Err(Error::Config(
                "give --events or both --recsys-clicks and --recsys-buys".into(),
            ))
        }
    };
    let log = enforce_click_closure(build_log(raw)?);
    let log = filter_users(&log, a.min_purchases, a.min_clicks)?;
    create_dir(&a.out)?;
    let mut buf = Vec::new();
    log.write_tsv(&mut buf).map_err(|e| Error::Io {
        path: a.out.join(EVENTS_FILE),
        source: e,
    })?;
    write_atomic(a.out.join(EVENTS_FILE), &buf)?;
    println!(
        "ingested {} users, {} items, {} events into {}",
        log.n(),
        log.m(),
        log.events().len(),
        a.out.display()
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let log = enforce_click_closure(build_log(read_event_source(&a.input)?)?);
    let out = split_with_stats(
        &log,
        &SplitConfig {
            purchase_fraction: a.fraction,
        },
    )?;
    save_dataset(&out.dataset, &a.out)?;
    let held_out: usize = out.dataset.all_test_purchases().iter().map(Vec::len).sum();
    println!(
        "split {} users, {} items: {} training events, {} held-out purchases, {} late clicks dropped",
        out.dataset.n(),
        out.dataset.m(),
        out.dataset.train().events().len(),
        held_out,
        out.discarded_clicks
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let (log, _) = generate_synthetic(&SynthConfig {
        n: a.users,
        m: a.items,
        true_k: a.k,
        clicks_per_user: a.clicks,
        purchases_per_user: a.buys,
        noise: a.noise,
        seed: a.seed,
    })?;
    let mut buf = Vec::new();
    log.write_tsv(&mut buf).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_atomic(&a.out, &buf)?;
    println!("wrote {} events to {}", log.events().len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    match a.method {
        Method::Wmf if a.eta.is_some() => {
            log::warn!("--eta is ignored by wmf, which is fitted by alternating least squares")
        }
        Method::MostPop if a.eta.is_some() => log::warn!("--eta is ignored by mostpop"),
        _ => {}
    }
    let data = load_dataset(&a.data)?;
    let config = TrainConfig {
        samples_per_epoch: a.samples_per_epoch,
        sampling_mode: match a.mode {
            ModeArg::Stochastic => SamplingMode::Stochastic,
            ModeArg::FullBatch => SamplingMode::FullBatch,
        },
        eval_every: a.eval_every,
        ..TrainConfig::new(HyperParams {
            k: a.k,
            eta: a.eta.unwrap_or(HyperParams::default().eta),
            lambda: a.lambda,
            epochs: a.epochs,
            seed: a.seed,
            method: a.method,
            wmf_alpha: a.wmf_alpha,
        })
    };
    let params = if a.threads > 1 {
        train_parallel(&data, &config, a.threads)?
    } else {
        train(&data, &config)?
    };
    save_checkpoint(&params, &a.out)?;
    println!(
        "trained {} ({} users, {} items, K={}) -> {}",
        a.method,
        params.n(),
        params.m(),
        params.k(),
        a.out.display()
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let params = load_checkpoint(&a.model)?;
    let mut report = evaluate(&data, &params, a.cutoff)?;
    if !a.per_user {
        report = report.without_per_user();
    }
    write_atomic(&a.report, report.to_json()?.as_bytes())?;
    let m = report.means;
    println!(
        "evaluated {} users ({} skipped): P@{k}={:.4} R@{k}={:.4} MAP={:.4} MRR={:.4} NDCG={:.4} AUC={:.4}",
        report.evaluated_users,
        report.skipped_users,
        m.precision,
        m.recall,
        m.map,
        m.mrr,
        m.ndcg,
        m.auc,
        k = report.k
    );
    Ok(())
}

fn grid_spec(a: &GridArgs) -> Result<GridSpec> {
    let file = match &a.grid {
        Some(path) => toml::from_str::<GridFile>(&read_text(path)?)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?,
        None => GridFile::default(),
    };
    let defaults = GridSpec::default();
    Ok(GridSpec {
        k_values: file.k.unwrap_or(defaults.k_values),
        eta_values: file.eta.unwrap_or(defaults.eta_values),
        lambda_values: file.lambda.unwrap_or(defaults.lambda_values),
        n_seeds: a.seeds,
        base_seed: a.base_seed,
        epochs: a.epochs,
        cutoff: a.cutoff,
        wmf_alpha: a.wmf_alpha,
        samples_per_epoch: a.samples_per_epoch,
    })
}

fn grid_cmd(a: GridArgs) -> Result<()> {
    let spec = grid_spec(&a)?;
    let data = load_dataset(&a.data)?;
    let holdout = match &a.holdout {
        Some(dir) => load_dataset(dir)?,
        None => data.clone(),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = a.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let result = pool.install(|| grid_search(&data, &holdout, &spec, a.method))?;
    let best_mean = result
        .cells
        .iter()
        .find(|c| c.k == result.best.k && c.eta == result.best.eta && c.lambda == result.best.lambda)
        .map(|c| c.mean)
        .unwrap_or_default();
    let report = GridReport {
        method: a.method,
        cutoff: spec.cutoff,
        best: result.best.clone(),
        best_mean,
        cells: result.cells,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_atomic(&a.report, json.as_bytes())?;
    if let Some(path) = &a.tsv {
        write_atomic(path, grid_tsv(&report.cells).as_bytes())?;
    }
    println!(
        "best {}: K={} eta={} lambda={} mean AUC={:.4} over {} cells",
        a.method,
        report.best.k,
        report.best.eta,
        report.best.lambda,
        best_mean.auc,
        report.cells.len()
    );
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut columns = Vec::new();
    let mut cutoff = None;
    for path in &a.inputs {
        let text = read_text(path)?;
        let (k, means) = match EvalReport::from_json(&text) {
            Ok(r) => (r.k, r.means),
            Err(_) => {
                let g: GridReport = serde_json::from_str(&text).map_err(|e| {
                    Error::Config(format!("{}: not an evaluation or grid report ({e})", path.display()))
                })?;
                (g.cutoff, g.best_mean)
            }
        };
        if *cutoff.get_or_insert(k) != k {
            return Err(Error::Config("reports use different cutoffs".into()));
        }
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        columns.push((label, means));
    }
    print!("{}", format_table(cutoff.unwrap_or(DEFAULT_CUTOFF), &columns));
    Ok(())
}
