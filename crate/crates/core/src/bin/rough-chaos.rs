use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use rough_chaos::experiments::config::{resolve_workers, WORKERS_ENV};
use rough_chaos::experiments::{emit_report, run, ExperimentConfig, ExperimentKind, OutputFormat};
use rough_chaos::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Experiment {
    Diagnose,
    IidRate,
    ChaosRate,
    Coupling,
}

impl From<Experiment> for ExperimentKind {
    fn from(e: Experiment) -> Self {
        match e {
            Experiment::Diagnose => ExperimentKind::Diagnose,
            Experiment::IidRate => ExperimentKind::IidRate,
            Experiment::ChaosRate => ExperimentKind::ChaosRate,
            Experiment::Coupling => ExperimentKind::Coupling,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Propagation-of-chaos experiments for mean-field rough differential equations.
#[derive(Debug, Parser)]
#[command(name = "rough-chaos", version, after_help = format!(
    "The worker count defaults to ${WORKERS_ENV} when set, otherwise to the number of cores.\n\
     Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 more than 5% aborted replications."
))]
struct Cli {
    experiment: Experiment,
    /// TOML configuration (dotted keys, e.g. `grid.steps = 256`).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Record per-replication wall-clock time in `runtime_ms`.
    #[arg(long)]
    timing: bool,
}

fn load(cli: &Cli) -> Result<(ExperimentConfig, usize), Error> {
    let mut cfg = ExperimentConfig::from_file(&cli.config)?;
    let kind = ExperimentKind::from(cli.experiment);
    if let Some(declared) = cfg.experiment {
        if declared != kind {
            return Err(Error::Config(format!(
                "config declares experiment '{}' but '{}' was requested",
                declared.id(),
                kind.id()
            )));
        }
    }
    cfg.experiment = Some(kind);
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(format) = cli.format {
        cfg.output.format = match format {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        };
    }
    cfg.output.timing |= cli.timing;
    cfg.validate()?;
    Ok((cfg, resolve_workers(cli.workers)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cfg, workers) = match load(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let report = match run(&cfg, workers) {
        Ok(r) => r,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let files = match emit_report(&report, &cfg) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: cannot write results: {e}");
            return ExitCode::from(1);
        }
    };
    println!("{}: {} rows -> {}", report.kind.id(), report.rows.len(), files.detail.display());
    for fit in &report.fits {
        if fit.error.is_empty() {
            println!("  {} slope {:.4} (r^2 {:.4}, {} points)", fit.metric, fit.slope, fit.r_squared, fit.points);
        } else {
            println!("  {} fit refused: {}", fit.metric, fit.error);
        }
    }
    if report.aborted_units > 0 {
        println!("  aborted {} of {} replications", report.aborted_units, report.units);
    }
    if report.too_many_aborts() {
        eprintln!("error: {:.1}% of replications aborted", 100.0 * report.aborted_fraction());
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}
