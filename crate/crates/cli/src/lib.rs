//! Command-line front end: simulate, ingest, train, evaluate and plot.

pub mod config;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use causal_rul::bearings::{default_split, ingest};
use causal_rul::dataset::Dataset;
use causal_rul::models::{init_params, load_checkpoint, save_checkpoint, ModelConfig, ModelKind};
use causal_rul::simdata::generate_dataset;
use causal_rul::trainer::{evaluate, train_from, HistoryRow, Report, StopReason};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use config::RunConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USER: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] causal_rul::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("training stopped on a non-finite value: {0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use causal_rul::Error as E;
        match self {
            CliError::Core(E::NonFinite(_) | E::Domain(_)) | CliError::Diverged(_) => EXIT_NUMERIC,
            CliError::Core(E::NonScalarLoss(_) | E::BackwardTwice) => 1,
            _ => EXIT_USER,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "causal-rul", version, about = "Remaining-useful-life estimation on irregular time series")]
pub struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic run-to-failure dataset.
    Simulate {
        /// TOML run configuration; missing keys take the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `simulation.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert raw bearing recordings into the dataset layout.
    Ingest {
        /// Directory holding one folder per bearing run.
        #[arg(long)]
        femto_root: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// TOML run configuration; missing keys take the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accept small observation-count mismatches with a warning.
        #[arg(long)]
        lenient: bool,
    },
    /// Train a model and write a checkpoint with its history.
    Train(TrainArgs),
    /// Predict at every observation and write a report.
    Evaluate(EvaluateArgs),
    /// Write one SVG per experiment from a report.
    Plot {
        /// A `report.csv` written by `evaluate`.
        #[arg(long)]
        report: PathBuf,
        /// Output directory for the SVG files.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; missing keys take the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::GnnTcnn)]
    pub model: ModelArg,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Past observations per prediction; defaults to `sampler.eval_past`.
    #[arg(long)]
    pub n_past: Option<usize>,
    /// TOML run configuration; missing keys take the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for choosing past observations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Output directory for `report.csv` and `experiments.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    GnnTcnn,
    LstmTcnn,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::GnnTcnn => ModelKind::GnnTcnn,
            ModelArg::LstmTcnn => ModelKind::LstmTcnn,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads {n}: {e}")))?;
    }
    match cli.command {
        Command::Simulate { config, out, seed } => cmd_simulate(config.as_deref(), &out, seed),
        Command::Ingest {
            femto_root,
            out,
            config,
            lenient,
        } => cmd_ingest(&femto_root, &out, config.as_deref(), lenient),
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args).map(|_| ()),
        Command::Plot { report, out } => cmd_plot(&report, &out).map(|_| ()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let wrap = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r.into_iter().collect::<Vec<_>>()).map_err(wrap)?;
    }
    w.flush().map_err(|e| wrap(e.into()))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("dataset.txt").is_file() {
        return Err(CliError::Usage(format!("no dataset found at {}", dir.display())));
    }
    Ok(Dataset::load(dir)?)
}

/// Channel count and segment length shared by every experiment.
fn segment_shape(data: &Dataset) -> Result<(usize, usize)> {
    let mut all = data.train.iter().chain(&data.test);
    let first = all
        .next()
        .ok_or_else(|| CliError::Usage("dataset has no experiments".into()))?;
    let shape = (first.channels(), first.segment_len());
    if let Some(e) = all.find(|e| (e.channels(), e.segment_len()) != shape) {
        return Err(causal_rul::Error::Dimension(format!(
            "experiment {} has segments {}×{}, expected {}×{}",
            e.id,
            e.channels(),
            e.segment_len(),
            shape.0,
            shape.1
        ))
        .into());
    }
    Ok(shape)
}

pub fn cmd_simulate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?.simulation.to_core();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = generate_dataset(&cfg)?;
    create_dir(out)?;
    data.save(out)?;
    let rows = [("train", &data.train), ("test", &data.test)].into_iter().flat_map(|(split, exps)| {
        exps.iter().map(move |e| {
            vec![
                e.id.clone(),
                split.to_string(),
                e.len().to_string(),
                e.failure_time.to_string(),
            ]
        })
    });
    write_rows(&out.join("summary.csv"), &["experiment", "split", "observations", "failure_time"], rows)?;
    info!("wrote {} train and {} test experiments to {}", data.train.len(), data.test.len(), out.display());
    Ok(())
}

pub fn cmd_ingest(femto_root: &Path, out: &Path, config: Option<&Path>, lenient: bool) -> Result<()> {
    let mut opts = RunConfig::load(config)?.femto.to_core();
    if lenient {
        opts.strict = false;
    }
    if !femto_root.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", femto_root.display())));
    }
    let data = ingest(femto_root, &default_split(), &opts)?;
    create_dir(out)?;
    data.save(out)?;
    info!("ingested {} train and {} test experiments", data.train.len(), data.test.len());
    Ok(())
}

fn history_rows(history: &[HistoryRow]) -> impl Iterator<Item = Vec<String>> + '_ {
    history.iter().map(|h| {
        vec![
            h.epoch.to_string(),
            h.lr.to_string(),
            h.train_nll.to_string(),
            h.val_nll.to_string(),
            h.n_past.to_string(),
        ]
    })
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let run_cfg = RunConfig::load(args.config.as_deref())?;
    let data = load_dataset(&args.data)?;
    let (channels, segment_len) = segment_shape(&data)?;
    let model_cfg = run_cfg.model.to_core(channels, segment_len, data.time_scale)?;
    let sampler_cfg = run_cfg.sampler.to_core();
    let mut train_cfg = run_cfg.train.to_core();
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }
    let kind = ModelKind::from(args.model);
    let params = init_params(kind, &model_cfg, train_cfg.seed)?;
    let run = train_from(kind, params, &data.train, &model_cfg, &sampler_cfg, &train_cfg)?;

    create_dir(&args.out)?;
    save_checkpoint(&args.out, kind, &model_cfg, &run.params)?;
    write_rows(
        &args.out.join("history.csv"),
        &["epoch", "lr", "train_nll", "val_nll", "n_past"],
        history_rows(&run.history),
    )?;
    match run.stop {
        StopReason::NonFinite(why) => {
            warn!("kept the parameters from epoch {:?}", run.best_epoch);
            Err(CliError::Diverged(why))
        }
        stop => {
            info!("{kind}: {stop:?} after {} epochs, best epoch {:?}", run.history.len(), run.best_epoch);
            Ok(())
        }
    }
}

/// Rejects a checkpoint whose input layout or time scale differs from the
/// dataset's.
fn check_manifest(cfg: &ModelConfig, data: &Dataset, channels: usize, segment_len: usize) -> Result<()> {
    if cfg.channels != channels || cfg.segment_len != segment_len {
        return Err(CliError::Usage(format!(
            "checkpoint expects {}×{} segments but the dataset has {channels}×{segment_len}",
            cfg.channels, cfg.segment_len
        )));
    }
    if cfg.time_scale != data.time_scale {
        return Err(CliError::Usage(format!(
            "checkpoint time scale {} differs from the dataset's {}",
            cfg.time_scale, data.time_scale
        )));
    }
    Ok(())
}

fn report_rows(report: &Report) -> impl Iterator<Item = Vec<String>> + '_ {
    report.rows.iter().map(|r| {
        vec![
            r.experiment.clone(),
            r.anchor.to_string(),
            r.timestamp.to_string(),
            r.n_nodes.to_string(),
            r.alpha.to_string(),
            r.beta.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.q05.to_string(),
            r.q50.to_string(),
            r.q95.to_string(),
            r.true_rul.to_string(),
            r.nll.to_string(),
        ]
    })
}

pub const REPORT_COLUMNS: [&str; 13] = [
    "experiment", "anchor", "timestamp", "n_nodes", "alpha", "beta", "mean", "std", "q05", "q50", "q95", "true_rul", "nll",
];

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Report> {
    let run_cfg = RunConfig::load(args.config.as_deref())?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let (channels, segment_len) = segment_shape(&data)?;
    check_manifest(&ck.config, &data, channels, segment_len)?;
    let sampler_cfg = run_cfg.sampler.to_core();
    sampler_cfg.validate()?;
    let n_past = args.n_past.unwrap_or(sampler_cfg.eval_past);
    if n_past == 0 {
        return Err(CliError::Usage("--n-past must be ≥ 1".into()));
    }
    let experiments: Vec<_> = match args.split {
        SplitArg::Train => data.train.clone(),
        SplitArg::Test => data.test.clone(),
        SplitArg::All => data.train.iter().chain(&data.test).cloned().collect(),
    };
    let report = evaluate(ck.kind, &ck.params, &ck.config, &experiments, &sampler_cfg, n_past, args.seed)?;
    if report.rows.is_empty() {
        return Err(CliError::Usage("no observations to evaluate".into()));
    }
    create_dir(&args.out)?;
    write_rows(&args.out.join("report.csv"), &REPORT_COLUMNS, report_rows(&report))?;
    write_rows(
        &args.out.join("experiments.csv"),
        &["experiment", "n", "mean_nll"],
        report
            .experiments
            .iter()
            .map(|e| vec![e.id.clone(), e.n.to_string(), e.mean_nll.to_string()]),
    )?;
    for e in &report.experiments {
        info!("{}: {} anchors, mean NLL {:.5}", e.id, e.n, e.mean_nll);
    }
    println!("aggregate_nll {}", report.aggregate_nll);
    Ok(report)
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

/// Returns the written SVG paths.
pub fn cmd_plot(report: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let wrap = |source| CliError::Csv {
        path: report.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(report).map_err(wrap)?;
    let rows: Vec<plot::PlotRow> = reader.deserialize().collect::<std::result::Result<_, _>>().map_err(wrap)?;
    if rows.is_empty() {
        return Err(CliError::Usage(format!("{} has no rows", report.display())));
    }
    create_dir(out)?;
    let mut written = Vec::new();
    for (id, rows) in plot::group(rows) {
        let svg = plot::render(&rows).map_err(CliError::Usage)?;
        let path = out.join(format!("{}.svg", file_stem(&id)));
        fs::write(&path, svg).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        written.push(path);
    }
    info!("wrote {} plots to {}", written.len(), out.display());
    Ok(written)
}
