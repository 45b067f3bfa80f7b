//! Command-line front end: runs experiments, exports reports and histories,
//! generates traces and prints shard security tables.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prophet_core::config::{ExperimentConfig, Mechanism};
use prophet_core::engine::run_experiment;
use prophet_core::metrics::{emit, security_report, write_history_csv, Format, MetricsReport};
use prophet_core::sequencer::OrderingRule;
use prophet_core::workload::{generate, save_trace};

#[derive(Parser)]
#[command(name = "prophet", version, about = "Sharded transaction processing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment per (shards, seed) pair and write the reports.
    Run {
        /// TOML configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mechanism: Option<Mechanism>,
        /// Shard count, or a comma-separated list.
        #[arg(long, value_delimiter = ',')]
        shards: Vec<u32>,
        /// Seed, or a comma-separated list.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// contract | state | rwdep, optionally followed by ",reorder".
        #[arg(long)]
        ordering: Option<OrderingRule>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: Format,
        /// Also write the confirmed history of the last run as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Write the configured generated workload as a trace file.
    GenTrace {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shard failure probability per shard size.
    Security {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Shard sizes to tabulate.
        #[arg(long, value_delimiter = ',', default_value = "50,100,200,300,400,500,600")]
        sizes: Vec<u64>,
    },
}

fn load(config: &Option<PathBuf>) -> prophet_core::Result<ExperimentConfig> {
    match config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> prophet_core::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            mechanism,
            shards,
            seed,
            ordering,
            out,
            format,
            history,
        } => {
            let mut base = load(&config)?;
            if let Some(m) = mechanism {
                base.mechanism = m;
            }
            if let Some(o) = ordering {
                base.ordering = o;
            }
            let shards = if shards.is_empty() { vec![base.sim.n_shards] } else { shards };
            let seeds = if seed.is_empty() { vec![base.sim.rng_seed] } else { seed };
            let mut reports: Vec<MetricsReport> = Vec::new();
            let mut last = None;
            let mut failed = false;
            for &n in &shards {
                for &s in &seeds {
                    let mut cfg = base.clone().with_seed(s);
                    cfg.sim.n_shards = n;
                    let output = run_experiment(&cfg)?;
                    for v in &output.report.invariant_violations {
                        eprintln!("invariant violation (shards={n}, seed={s}): {v}");
                        failed = true;
                    }
                    reports.push(output.report.clone());
                    last = Some(output);
                }
            }
            emit(&reports, format, &out)?;
            if let (Some(path), Some(output)) = (history, last) {
                let file = std::io::BufWriter::new(std::fs::File::create(path)?);
                write_history_csv(&output.report.history, file)?;
            }
            Ok(if failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::GenTrace { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let txns = generate(&cfg.workload)?;
            save_trace(out, cfg.workload.n_contracts, &txns)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Security { config, sizes } => {
            let cfg = load(&config)?;
            let report = security_report(&cfg.sim, &sizes)?;
            println!(
                "nodes={} malicious={} target={:e}",
                report.total_nodes, report.malicious, report.target
            );
            println!("shard_size,failure_probability,meets_target");
            for row in &report.rows {
                println!("{},{:e},{}", row.shard_size, row.failure_probability, row.meets_target);
            }
            match report.min_shard_size {
                Some(m) => println!("min_shard_size={m}"),
                None => println!("min_shard_size=none"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
