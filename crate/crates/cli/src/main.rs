//! Command-line driver for the exploration testbed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use rtb_explore::experiment::{self, AuditRecord, ExperimentConfig, Report, SweepSummary};

#[derive(Parser, Debug)]
#[command(name = "rtb-explore", version, about = "Uncertainty-driven supply exploration A/B testbed")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one three-group experiment.
    Run {
        /// TOML config; every block is optional and defaults apply.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Write a per-decision JSONL audit log.
        #[arg(long)]
        audit: bool,
    },
    /// Run the experiment once per seed and aggregate the comparisons.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        audit: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config file {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one experiment into `dir`: effective config, report, CSV and
/// optionally the audit log.
fn run_into(cfg: &ExperimentConfig, dir: &Path, audit: bool) -> Result<Report> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join("config.toml"), toml::to_string(cfg)?)?;
    let report = if audit {
        let file = File::create(dir.join("audit.jsonl"))?;
        let mut writer = BufWriter::new(file);
        let mut io_err = None;
        let mut sink = |rec: &AuditRecord| {
            if io_err.is_none() {
                let line = serde_json::to_string(rec).expect("audit record serializes");
                if let Err(e) = writeln!(writer, "{line}") {
                    io_err = Some(e);
                }
            }
        };
        let report = experiment::run_with_audit(cfg, Some(&mut sink))?;
        if let Some(e) = io_err {
            return Err(e).context("writing audit log");
        }
        writer.flush()?;
        report
    } else {
        experiment::run(cfg)?
    };
    fs::write(dir.join("report.toml"), report.to_toml())?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    Ok(report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Run { config, seed, out, audit } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if verbose {
                eprintln!("running seed {} into {}", cfg.seed, out.display());
            }
            let report = run_into(&cfg, &out, audit)?;
            print!("{}", report.to_csv());
        }
        Command::Sweep { config, seeds, out, audit } => {
            if seeds.is_empty() {
                bail!("at least one seed is required");
            }
            let base = load_config(config.as_deref())?;
            let reports: Vec<Report> = seeds
                .par_iter()
                .map(|&s| {
                    let cfg = ExperimentConfig { seed: s, ..base.clone() };
                    let dir = out.join(format!("seed-{s}"));
                    if verbose {
                        eprintln!("seed {s} -> {}", dir.display());
                    }
                    run_into(&cfg, &dir, audit).with_context(|| format!("seed {s}"))
                })
                .collect::<Result<_>>()?;
            let summary = SweepSummary::from_reports(&reports);
            fs::write(out.join("aggregate.csv"), SweepSummary::aggregate_csv(&reports))?;
            fs::write(out.join("summary.toml"), summary.to_toml())?;
            print!("{}", summary.to_toml());
        }
    }
    Ok(())
}
