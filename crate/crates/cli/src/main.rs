use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use thiserror::Error;

use txsim_core::engine::{run_workload, RunOptions, SimError};
use txsim_core::io::{read_blocks, write_blocks, write_trace, IoError};
use txsim_core::ledger::WorldState;
use txsim_core::metrics::{compare_reports, compute_metrics, MetricsError, MetricsReport};
use txsim_core::replay::{self, ReplayError};
use txsim_core::scenario::{ConfigError, ScenarioConfig};
use txsim_core::workload::{generate_workload, write_workload_jsonl, WorkloadError};

#[derive(Parser)]
#[command(name = "txsim", version, about = "Execute-order ledger pipeline simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its report, trace and block stream.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        verbose: bool,
    },
    /// Rank several `report.json` files (or run directories) side by side.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Comparison CSV to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        verbose: bool,
    },
    /// Re-execute a block stream from genesis and check the final state.
    Replay {
        blocks: PathBuf,
        /// Recorded final state; defaults to `final_state.json` next to the
        /// block stream when present.
        #[arg(long = "final")]
        final_state: Option<PathBuf>,
        #[arg(long)]
        verbose: bool,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Simulation(SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stream(#[from] IoError),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("replay diverged: {0}")]
    Divergence(ReplayError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Simulation(SimError::Config(_)) => 2,
            CliError::Simulation(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Metrics(MetricsError::MismatchedWorkload) => 2,
            CliError::Config(_) | CliError::Workload(_) | CliError::Parse { .. } => 2,
            _ => 1,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Simulation(e)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_run(config: &Path, out: &Path, verbose: bool) -> Result<(), CliError> {
    let cfg = ScenarioConfig::load(config)?;
    let started = Instant::now();
    let txs = generate_workload(&cfg.workload)?;
    fs::create_dir_all(out).map_err(|source| CliError::File {
        path: out.to_path_buf(),
        source,
    })?;
    write_workload_jsonl(&txs, create(&out.join("workload.jsonl"))?)?;
    let output = run_workload(&cfg, txs, RunOptions::default())?;
    let mut report = compute_metrics(&output.trace, cfg.strategy.name())?;
    report.workload = Some(serde_json::to_string(&cfg.workload).expect("workload serializes"));

    report.write_csv(create(&out.join("report.csv"))?)?;
    write_text(&out.join("report.json"), &report.to_json())?;
    write_trace(&output.trace, create(&out.join("trace.jsonl"))?)?;
    write_blocks(&output, create(&out.join("blocks.jsonl"))?)?;
    write_text(&out.join("final_state.json"), &output.final_state.to_json())?;

    print!("{}", report.render());
    if verbose {
        eprintln!(
            "{} transactions, {} blocks, {} simulated ticks, {:.2?} wall",
            output.transactions.len(),
            output.blocks.len(),
            output.end_tick,
            started.elapsed()
        );
    }
    Ok(())
}

fn load_report(path: &Path) -> Result<MetricsReport, CliError> {
    let path = if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_path_buf()
    };
    serde_json::from_reader(open(&path)?).map_err(|source| CliError::Parse { path, source })
}

fn cmd_compare(paths: &[PathBuf], out: &Path, verbose: bool) -> Result<(), CliError> {
    let reports = paths.iter().map(|p| load_report(p)).collect::<Result<Vec<_>, _>>()?;
    let table = compare_reports(&reports)?;
    table.write_csv(create(out)?)?;
    print!("{}", table.render());
    if verbose {
        eprintln!("compared {} reports into {}", reports.len(), out.display());
    }
    Ok(())
}

fn cmd_replay(blocks: &Path, final_state: Option<&Path>, verbose: bool) -> Result<(), CliError> {
    let records = read_blocks(open(blocks)?)?;
    let sibling = blocks.with_file_name("final_state.json");
    let expected = match final_state {
        Some(p) => Some(p.to_path_buf()),
        None if sibling.is_file() => Some(sibling),
        None => None,
    };
    let state = match expected {
        Some(path) => {
            let recorded: WorldState =
                serde_json::from_reader(open(&path)?).map_err(|source| CliError::Parse { path, source })?;
            replay::verify(&records, &recorded).map_err(CliError::Divergence)?
        }
        None => replay::replay(&records).map_err(CliError::Divergence)?,
    };
    println!(
        "replayed {} blocks: height {}, {} wallets, total balance {}",
        records
            .iter()
            .filter(|r| matches!(r, txsim_core::io::BlockStreamRecord::Block(_)))
            .count(),
        state.height,
        state.wallets.len(),
        state.total_balance()
    );
    if verbose {
        println!("{}", state.to_json());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, out, verbose } => cmd_run(config, out, *verbose),
        Command::Compare { reports, out, verbose } => cmd_compare(reports, out, *verbose),
        Command::Replay {
            blocks,
            final_state,
            verbose,
        } => cmd_replay(blocks, final_state.as_deref(), *verbose),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
