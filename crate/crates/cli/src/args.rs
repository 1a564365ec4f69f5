use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::dataset::Split;

#[derive(Debug, Parser)]
#[command(name = "ecgmoe", version, about = "Multi-task ECG analysis with a period-aware mixture of experts")]
#[command(after_help = "Log level is read from ECGMOE_LOG (error, warn, info, debug, trace).\n\
Exit codes: 0 ok, 1 usage, 2 config, 3 runtime.")]
pub struct Cli {
    /// Run configuration (TOML). Built-in defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Overrides both the dataset seed and the training seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Output directory (defaults to the config's paths).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Checkpoint to write (train) or read (other commands).
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Dataset directory (defaults to `paths.data_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    pub fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset (records plus manifest.csv) in the data directory.
    Synth,
    /// Train a model; writes metrics.csv, metrics.json and the checkpoint.
    Train,
    /// Evaluate a checkpoint; writes eval.json.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Measure inference throughput, batch latency and peak memory.
    Bench {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Records per timed batch (defaults to `train.batch_size`).
        #[arg(long, value_name = "N")]
        batch: Option<usize>,
        /// Timed passes over the records.
        #[arg(long, value_name = "N", default_value_t = 1)]
        repeats: usize,
    },
    /// Dump per-record, per-task gate weights as CSV.
    GateInspect {
        /// Record files; the dataset's test split when omitted.
        #[arg(long, value_name = "PATH")]
        record: Vec<PathBuf>,
    },
    /// Dump attention weights per head as CSV.
    AttnDump {
        /// Record files; the dataset's test split when omitted.
        #[arg(long, value_name = "PATH")]
        record: Vec<PathBuf>,
    },
    /// Dump detected R-peaks and RR intervals of one record as CSV.
    Beats {
        #[arg(long, value_name = "PATH")]
        record: PathBuf,
        /// Lead to detect on (defaults to `model.detection_lead`).
        #[arg(long, value_name = "N")]
        lead: Option<usize>,
    },
    /// Export one record's samples as CSV.
    Export {
        #[arg(long, value_name = "PATH")]
        record: PathBuf,
    },
}
