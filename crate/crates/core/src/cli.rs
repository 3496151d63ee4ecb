//! Command-line entry point: `run`, `schedule`, `drift` and `partition-stats`.
//!
//! Every subcommand reads a `key = value` config and writes CSV files into the
//! config's `output` directory. Exit status is 0 on success, 1 on a config
//! error and 2 on a runtime error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{DriftConfig, ExperimentConfig};
use crate::data;
use crate::error::{Error, Result};
use crate::federation::{prepare_data, run_experiment};
use crate::metrics::drift_monte_carlo;

#[derive(Debug, Parser)]
#[command(name = "fedara", about = "Federated adapter fine-tuning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a federated experiment; writes rounds.csv, ranks.csv and summary.txt.
    Run { config: PathBuf },
    /// Emit the triplet budget for every round; writes schedule.csv.
    Schedule { config: PathBuf },
    /// Monte Carlo drift-variance study; writes drift.csv.
    Drift { config: PathBuf },
    /// Per-client label statistics of the partition; writes partition_stats.csv.
    PartitionStats { config: PathBuf },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Failure of a subcommand, split by exit status.
#[derive(Debug)]
pub enum Failure {
    Config(Error),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

fn config_stage<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Config)
}

fn runtime_stage<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Config(_) | Error::Parse { .. } => Failure::Config(e),
        other => Failure::Runtime(other),
    })
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `contents` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn cmd_run(config_path: &Path) -> std::result::Result<String, Failure> {
    let config = config_stage(read_config(config_path).and_then(|t| ExperimentConfig::parse(&t)))?;
    let artifact = runtime_stage(run_experiment(&config))?;
    let out = &config.output;
    runtime_stage(write_atomic(&out.join("rounds.csv"), &artifact.rounds_csv()))?;
    runtime_stage(write_atomic(&out.join("ranks.csv"), &artifact.ranks_csv()))?;
    let summary = artifact.summary();
    runtime_stage(write_atomic(&out.join("summary.txt"), &summary))?;
    Ok(summary)
}

pub fn cmd_schedule(config_path: &Path) -> std::result::Result<String, Failure> {
    let config = config_stage(read_config(config_path).and_then(|t| ExperimentConfig::parse(&t)))?;
    let schedule = config_stage(config.schedule())?;
    let mut csv = String::from("t,budget\n");
    for t in 0..=config.total_rounds {
        csv.push_str(&format!("{t},{}\n", schedule.budget(t)));
    }
    runtime_stage(write_atomic(&config.output.join("schedule.csv"), &csv))?;
    Ok(format!(
        "budget {} -> {} over {} rounds\n",
        schedule.b0, schedule.b_final, config.total_rounds
    ))
}

pub fn cmd_drift(config_path: &Path) -> std::result::Result<String, Failure> {
    let config = config_stage(read_config(config_path).and_then(|t| DriftConfig::parse(&t)))?;
    let report = runtime_stage(drift_monte_carlo(&config.params))?;
    runtime_stage(write_atomic(&config.output.join("drift.csv"), &report.to_csv()))?;
    Ok(format!(
        "slope BA = {}\nslope BEA = {}\n",
        report.slope_ba, report.slope_bea
    ))
}

pub fn cmd_partition_stats(config_path: &Path) -> std::result::Result<String, Failure> {
    let config = config_stage(read_config(config_path).and_then(|t| ExperimentConfig::parse(&t)))?;
    let prepared = runtime_stage(prepare_data(&config))?;
    let train = prepared.dataset.subset(&prepared.split.train);
    let mut csv = String::from("client,samples,entropy");
    for c in 0..train.num_classes {
        csv.push_str(&format!(",class_{c}"));
    }
    csv.push('\n');
    for (id, shard) in prepared.shards.iter().enumerate() {
        let counts = train.class_counts(shard);
        csv.push_str(&format!("{id},{},{}", shard.len(), data::label_entropy(&counts)));
        for c in counts {
            csv.push_str(&format!(",{c}"));
        }
        csv.push('\n');
    }
    runtime_stage(write_atomic(&config.output.join("partition_stats.csv"), &csv))?;
    let mut msg = format!(
        "clients={} mean_label_entropy={}\n",
        prepared.shards.len(),
        data::mean_client_entropy(&train, &prepared.shards)
    );
    for w in &prepared.split.warnings {
        msg.push_str(&format!("warning: {w}\n"));
    }
    Ok(msg)
}

/// Dispatches a parsed command, printing its report or error.
pub fn execute(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Run { config } => cmd_run(config),
        Command::Schedule { config } => cmd_schedule(config),
        Command::Drift { config } => cmd_drift(config),
        Command::PartitionStats { config } => cmd_partition_stats(config),
    };
    match result {
        Ok(report) => {
            print!("{report}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.error());
            f.exit_code()
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
