//! Command-line front end: baseline training, pruning and report tables.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use prunekit::config::RunConfigFile;
use prunekit::model::checkpoint::{load_checkpoint, save_checkpoint};
use prunekit::model::{build_toy_cnn, count_flops, plant_duplicate_filters};
use prunekit::pipeline::{prune_l1_baseline, prune_network, prune_random_baseline, TimingConfig};
use prunekit::report::{comparison_table, write_summary_csv};
use prunekit::train::{accuracy, fit};
use prunekit::{Error, PruneMethod, PruneReport};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "prunekit", version, about = "Learned filter pruning for small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the default run configuration as JSON.
    Defaults,
    /// Train the baseline network and write its checkpoint.
    TrainBaseline(TrainArgs),
    /// Prune a baseline checkpoint.
    Prune(PruneArgs),
    /// Tabulate one or more prune reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Root seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["layer", "all"])))]
pub struct PruneArgs {
    #[command(flatten)]
    pub common: Common,
    /// Baseline checkpoint (default: <out>/baseline.ckpt).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Prune a single conv unit.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Prune every prunable conv unit, lowest first.
    #[arg(long)]
    pub all: bool,
    /// Allowed validation accuracy drop in percentage points.
    #[arg(long, allow_negative_numbers = true)]
    pub bound: Option<f64>,
    #[arg(long, default_value = "learned", value_parser = ["learned", "l1", "random"])]
    pub method: String,
    /// Take per-layer keep counts from an earlier report (l1/random).
    #[arg(long)]
    pub from_report: Option<PathBuf>,
    /// Per-layer keep counts as `layer:count,...` (l1/random).
    #[arg(long)]
    pub keep_counts: Option<String>,
    /// Keep the reference accuracy at the unpruned network's value.
    #[arg(long)]
    pub fixed_pstar: bool,
    /// Concurrent rollout evaluations (default: cores, capped at the rollout count).
    #[arg(long)]
    pub rollout_workers: Option<usize>,
    /// Agent training epochs per layer, overriding the config.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Seed for the pruning stage only.
    #[arg(long)]
    pub prune_seed: Option<u64>,
    /// Measure inference time before and after pruning.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Write the per-run CSV here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidAction(_) | Error::NotPrunable(_) => {
                    EXIT_CONFIG
                }
                Error::Numeric(_) | Error::Shape(_) | Error::NoForward(_) => EXIT_NUMERIC,
                Error::DataFormat(_)
                | Error::NotACheckpoint
                | Error::CheckpointVersion { .. }
                | Error::Truncated(_)
                | Error::Integrity(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_) => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_CONFIG
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Defaults => emit(&(RunConfigFile::default().to_json()? + "\n")),
        Command::TrainBaseline(args) => train_baseline(&args),
        Command::Prune(args) => prune(&args),
        Command::Report(args) => report(&args),
    }
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other.map_err(Error::Io)?),
    }
}

fn load_config(common: &Common) -> Result<RunConfigFile> {
    let mut cfg = match &common.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(Error::Io)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

#[derive(Serialize)]
struct BaselineSummary {
    seed: u64,
    name: String,
    trained_widths: Vec<usize>,
    planted: bool,
    params: usize,
    flops: u64,
    val_acc: f64,
    test_acc: Option<f64>,
    /// Relative to the summary's directory.
    checkpoint: PathBuf,
}

fn train_baseline(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    cfg.validate()?;
    let data = cfg.datasets()?;
    let mut model = build_toy_cnn(&cfg.toy_config(data.train.num_classes(), data.train.image_shape()))?;
    model.meta.seed = cfg.seed;
    fit(&mut model, &data.train, &cfg.baseline, cfg.baseline_seed())?;
    if cfg.model.plant_duplicates {
        model = plant_duplicate_filters(&model)?;
    }
    create_out(&args.common.out)?;
    let ckpt = args.common.out.join("baseline.ckpt");
    save_checkpoint(&model, &ckpt).with_context(|| format!("writing {}", ckpt.display()))?;

    let summary = BaselineSummary {
        seed: cfg.seed,
        name: model.meta.name.clone(),
        trained_widths: cfg.model.widths.clone(),
        planted: cfg.model.plant_duplicates,
        params: model.num_params(),
        flops: count_flops(&model, model.input_shape())?.total_flops,
        val_acc: accuracy(&model, &data.val)?,
        test_acc: data.test.as_ref().map(|t| accuracy(&model, t)).transpose()?,
        checkpoint: PathBuf::from("baseline.ckpt"),
    };
    let path = args.common.out.join("baseline.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(Error::Io)?;
    emit(&format!(
        "baseline: val {:.2}%{} params {} -> {}\n",
        summary.val_acc,
        summary.test_acc.map_or(String::new(), |t| format!(" test {t:.2}%")),
        summary.params,
        path.display()
    ))
}

/// Parses `layer:count,layer:count`.
pub fn parse_keep_counts(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let (l, k) =
                pair.split_once(':').ok_or_else(|| Error::Config(format!("keep count {pair:?} is not layer:count")))?;
            let parse = |v: &str| {
                v.trim().parse::<usize>().map_err(|_| Error::Config(format!("keep count {pair:?} is not layer:count")))
            };
            Ok((parse(l)?, parse(k)?))
        })
        .collect()
}

fn prune(args: &PruneArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(b) = args.bound {
        cfg.prune.bound = b;
    }
    if let Some(w) = args.rollout_workers {
        cfg.prune.trainer.workers = w;
    }
    if let Some(e) = args.max_epochs {
        cfg.prune.trainer.max_epochs = e;
    }
    if let Some(s) = args.prune_seed {
        cfg.prune.seed = Some(s);
    }
    if args.fixed_pstar {
        cfg.prune.fixed_pstar = true;
    }
    if args.timing && cfg.prune.timing.is_none() {
        cfg.prune.timing = Some(TimingConfig::default());
    }
    cfg.prune.layers = args.layer.map(|l| vec![l]);
    cfg.validate()?;
    let method: PruneMethod = args.method.parse()?;

    let keep_counts = match (&args.from_report, &args.keep_counts) {
        (Some(_), Some(_)) => bail!(Error::Config("give either --from-report or --keep-counts, not both".into())),
        (Some(path), None) => Some(PruneReport::read_json(path)?.keep_counts()),
        (None, Some(s)) => Some(parse_keep_counts(s)?),
        (None, None) => None,
    };
    if method != PruneMethod::Learned && keep_counts.is_none() {
        bail!(Error::Config(format!("--method {method} needs --from-report or --keep-counts")));
    }
    if method == PruneMethod::Learned && keep_counts.is_some() {
        bail!(Error::Config("keep counts apply to the l1 and random methods only".into()));
    }

    let ckpt = args.checkpoint.clone().unwrap_or_else(|| args.common.out.join("baseline.ckpt"));
    let base = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let data = cfg.datasets()?;
    let run = cfg.prune_config();
    let counts = |all: Vec<(usize, usize)>| match args.layer {
        Some(l) => all.into_iter().filter(|(x, _)| *x == l).collect(),
        None => all,
    };
    let out = match method {
        PruneMethod::Learned => prune_network(&base, &data.train, &data.val, data.test.as_ref(), &run)?,
        PruneMethod::L1 => {
            prune_l1_baseline(&base, &counts(keep_counts.unwrap()), &data.train, &data.val, data.test.as_ref(), &run)?
        }
        PruneMethod::Random => prune_random_baseline(
            &base,
            &counts(keep_counts.unwrap()),
            &data.train,
            &data.val,
            data.test.as_ref(),
            &run,
        )?,
    };

    let dir = &args.common.out;
    create_out(dir)?;
    let stem = method.to_string();
    out.report.write_json(&dir.join(format!("{stem}-report.json")))?;
    let csv = fs::File::create(dir.join(format!("{stem}-report.csv"))).map_err(Error::Io)?;
    write_summary_csv(&[(stem.clone(), out.report.clone())], csv)?;
    out.report.write_layer_csv(&dir.join(format!("{stem}-layers.csv")))?;
    for log in &out.logs {
        log.write_csv(&dir.join(format!("{stem}-trainlog-layer{}.csv", log.layer_index)))?;
    }
    save_checkpoint(&out.model, &dir.join(format!("{stem}.ckpt")))?;
    emit(&comparison_table(&[(stem, out.report)]))
}

fn report(args: &ReportArgs) -> Result<()> {
    let mut runs = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        let r = PruneReport::read_json(path).with_context(|| format!("reading {}", path.display()))?;
        let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        runs.push((label, r));
    }
    let mut text = comparison_table(&runs);
    match &args.csv {
        Some(path) => write_summary_csv(&runs, fs::File::create(path).map_err(Error::Io)?)?,
        None => {
            let mut buf = Vec::new();
            write_summary_csv(&runs, &mut buf)?;
            text.push('\n');
            text.push_str(&String::from_utf8_lossy(&buf));
        }
    }
    emit(&text)
}
