//! `sormamba` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] sormamba::Error),
}

impl CliError {
    /// Errors raised while reading inputs count as usage errors.
    pub fn from_setup(e: sormamba::Error) -> Self {
        CliError::Usage(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sormamba", version, about = "Channel-order robust state-space forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set model.lambda=0.1`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    pub fn load(&self) -> Result<config::RunConfig, CliError> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("train.seed={s}"));
        }
        config::RunConfig::load(self.config.as_deref(), &o)
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Ccm,
    Mm,
    Rec,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalysisKind {
    Bias,
    Robustness,
    Correlation,
    Efficiency,
    Missingness,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and split the dataset; write split and channel statistics.
    PrepareData(Common),
    /// Supervised training, one model per horizon.
    Train(Common),
    /// Self-supervised encoder pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "ccm")]
        task: Task,
    },
    /// Train only the forecasting head on a pretrained encoder.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every forecasting parameter starting from a pretrained encoder.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Test metrics of a trained checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Analyses emitting plot-ready CSV files.
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated missing rates.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Also write per-channel encoder tokens.
        #[arg(long)]
        export_embeddings: bool,
    },
    /// Per-channel encoder tokens of one test window as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    use commands as c;
    match cli.command {
        Command::PrepareData(common) => c::prepare_data(&common.load()?),
        Command::Train(common) => c::train(&common.load()?),
        Command::Pretrain { common, task } => c::pretrain(&common.load()?, task),
        Command::Probe { common, checkpoint } => c::adapt(&common.load()?, &checkpoint, false),
        Command::Finetune { common, checkpoint } => c::adapt(&common.load()?, &checkpoint, true),
        Command::Evaluate { common, checkpoint } => c::evaluate(&common.load()?, &checkpoint),
        Command::Analyze {
            kind,
            common,
            checkpoint,
            rates,
            export_embeddings,
        } => {
            let mut cfg = common.load()?;
            if let Some(r) = rates {
                cfg.analysis.rates = r;
            }
            c::analyze(&cfg, kind, checkpoint.as_deref(), export_embeddings)
        }
        Command::ExportEmbeddings {
            common,
            checkpoint,
            window,
        } => c::export_embeddings(&common.load()?, checkpoint.as_deref(), window),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
