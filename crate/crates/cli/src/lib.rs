//! Experiment pipeline behind the `compresskit` binary: train, scan,
//! prune, quantize, bench and overfit-study.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{DatasetSource, ExperimentConfig};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG_OR_IO: i32 = 2;
    pub const MISSING_ARTIFACT: i32 = 3;
    pub const PROTOCOL: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("protocol failure: {0}")]
    Protocol(String),
    #[error(transparent)]
    Core(#[from] compresskit::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use compresskit::Error as E;
        match self {
            CliError::Config(_) | CliError::Io(_) => exit::CONFIG_OR_IO,
            CliError::MissingArtifact(_) => exit::MISSING_ARTIFACT,
            CliError::Protocol(_) => exit::PROTOCOL,
            CliError::Core(E::NonFinite(_) | E::AccumulatorOverflow { .. }) => exit::PROTOCOL,
            CliError::Core(_) => exit::CONFIG_OR_IO,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "compresskit", version, about = "Prune and quantise small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Training samples per class.
    #[arg(long, global = true)]
    pub subset: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub reference: Option<PathBuf>,
    #[arg(long, global = true)]
    pub arch: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub dataset: Option<DatasetSource>,
    #[arg(long, global = true)]
    pub width: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub sensitivity: Option<f64>,
    /// Comma-separated sparsity grid for `scan`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub bits: Option<u8>,
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
    #[arg(long, global = true)]
    pub repetitions: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a reference model.
    Train,
    /// Sensitivity scan of a trained model.
    Scan,
    /// Iterative prune-retrain of a trained model.
    Prune,
    /// Post-training 8-bit quantisation of a (pruned) model.
    Quantize,
    /// Batch-1 latency statistics of a model.
    Bench,
    /// Overfit without regularisation, then prune.
    OverfitStudy,
}

impl Cli {
    /// File configuration with command-line overrides applied.
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = &self.$field { c.$target = v.clone(); })*
            };
        }
        set!(seed => seed, out => out, arch => arch, dataset => dataset, width => width,
             epochs => epochs, sensitivity => sensitivity, grid => grid, bits => bit_width,
             warmup => warmup, repetitions => repetitions);
        if self.subset.is_some() {
            c.subset = self.subset;
        }
        if self.model.is_some() {
            c.model = self.model.clone();
        }
        if self.reference.is_some() {
            c.reference = self.reference.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.resolve()?;
    match cli.command {
        Command::Train => commands::cmd_train(&cfg).map(drop),
        Command::Scan => commands::cmd_scan(&cfg).map(drop),
        Command::Prune => commands::cmd_prune(&cfg).map(drop),
        Command::Quantize => commands::cmd_quantize(&cfg).map(drop),
        Command::Bench => commands::cmd_bench(&cfg).map(drop),
        Command::OverfitStudy => commands::cmd_overfit_study(&cfg).map(drop),
    }
}
