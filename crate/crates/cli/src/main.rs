use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use noncross::lab::experiment::{self, run_dir, train_or_load, write_reports, write_samples};
use noncross::lab::{export_plots, run_experiment, ExperimentConfig, OUT_DIR_ENV};
use noncross::metrics::{continuity_probe, spearman, ProbeConfig, ProbeRow};
use noncross::sampling::time_grid;
use noncross::ConditionStrategy;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Lab(#[from] noncross::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "noncross", version, about = "Non-crossing diffusion lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment config. Defaults to the two-Gaussian toy.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train both models, or reuse matching checkpoints.
    Train(Common),
    /// Sample every method and export trajectories.
    Sample(Common),
    /// Sample, score and write metric reports.
    Eval(Common),
    /// Full sweep over every condition strategy and step count.
    Sweep(Common),
    /// Continuity probe on the non-crossing model (discrete schedules only).
    Probe(ProbeArgs),
    /// Render SVG plots from an existing run.
    Plot(Common),
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,

    #[arg(long, default_value = "prev_step_pred")]
    strategy: ConditionStrategy,

    #[arg(long, default_value_t = 20)]
    n_steps: usize,

    /// Grid time to perturb. Defaults to the middle of the grid.
    #[arg(long)]
    t_inject: Option<usize>,

    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.01, 0.05, 0.1, 0.2, 0.5])]
    weights: Vec<f64>,

    #[arg(long, default_value_t = 200)]
    n_seeds: usize,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::toy(0),
    };
    let cfg = match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Creates the run directory and records the config in it.
fn prepare(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = run_dir(cfg)?;
    fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    write(&dir.join("config.json"), cfg.to_json_pretty()?.as_bytes())?;
    Ok(dir)
}

fn probe(args: &ProbeArgs) -> Result<PathBuf> {
    let cfg = load_config(&args.common)?;
    let sched = cfg
        .schedule
        .build()?
        .ok_or_else(|| CliError::Usage("probe needs a discrete noise schedule".into()))?;
    let dir = prepare(&cfg)?;
    let models = train_or_load(&cfg, &dir)?;
    let t_inject = match args.t_inject {
        Some(t) => t,
        None => {
            let grid = time_grid(sched.len(), args.n_steps)?;
            grid[grid.len() / 2]
        }
    };
    let pc = ProbeConfig {
        strategy: args.strategy,
        n_steps: args.n_steps,
        t_inject,
        weights: args.weights.clone(),
        n_seeds: args.n_seeds,
        seed: cfg.seed,
    };
    let rows = continuity_probe(&models.noncross.net, &sched, &pc)?;
    let mut csv = String::from("weight,displacement\n");
    for r in &rows {
        csv.push_str(&format!("{},{}\n", r.weight, r.displacement));
    }
    write(&dir.join("probe.csv"), csv.as_bytes())?;
    let report = serde_json::json!({
        "config_hash": cfg.config_hash()?,
        "probe": pc,
        "rows": rows,
    });
    write(&dir.join("probe.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    let (w, d): (Vec<f64>, Vec<f64>) = rows.iter().map(|r: &ProbeRow| (r.weight, r.displacement)).unzip();
    match spearman(&w, &d)? {
        Some(rho) => println!("spearman {rho}"),
        None => println!("spearman undefined (constant displacement)"),
    }
    Ok(dir)
}

fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let dir = prepare(&cfg)?;
            train_or_load(&cfg, &dir)?;
            Ok(dir)
        }
        Command::Sample(c) => {
            let cfg = load_config(&c)?;
            let dir = prepare(&cfg)?;
            let models = train_or_load(&cfg, &dir)?;
            let cells = experiment::evaluate(&cfg, &models)?;
            write_samples(&cfg, &dir, &cells)?;
            Ok(dir)
        }
        Command::Eval(c) => {
            let cfg = load_config(&c)?;
            let dir = prepare(&cfg)?;
            let models = train_or_load(&cfg, &dir)?;
            let cells = experiment::evaluate(&cfg, &models)?;
            write_samples(&cfg, &dir, &cells)?;
            write_reports(&dir, &cells)?;
            for cell in &cells {
                println!("{}", serde_json::to_string(&cell.report)?);
            }
            Ok(dir)
        }
        Command::Sweep(c) => {
            let mut cfg = load_config(&c)?;
            cfg.sample.strategies = ConditionStrategy::ALL.to_vec();
            let out = run_experiment(&cfg)?;
            print!("{}", fs::read_to_string(out.dir.join("sweep.csv")).unwrap_or_default());
            Ok(out.dir)
        }
        Command::Probe(args) => probe(&args),
        Command::Plot(c) => {
            let cfg = load_config(&c)?;
            let dir = run_dir(&cfg)?;
            for path in export_plots(&dir)? {
                println!("{}", path.display());
            }
            Ok(dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            eprintln!("run directory: {} (override with {OUT_DIR_ENV})", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
