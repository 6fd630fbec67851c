//! Command-line front end for the two-stage FDY-LKA-CRNN pipeline.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{PathsConfig, RunConfig};

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for malformed invocations.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for data, configuration and contract failures.
pub const EXIT_DATA: i32 = 2;

/// An invocation problem clap cannot see, such as a flag that is only
/// required when the config file leaves the value unset.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "fdylka", version, about = "FDY-LKA-CRNN sound event detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel workers for featurization and prediction.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory or file, depending on the command.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PseudoMode {
    /// Frame threshold only.
    InDomain,
    /// Frame threshold, clip confidence and the given weak label.
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Scope {
    Global,
    PerBand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MatchingArg {
    Greedy,
    Bipartite,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic soundscape dataset.
    Synthgen {
        #[command(flatten)]
        common: Common,
        /// SynthSpec JSON; defaults are used when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Compute log-mel features and corpus statistics.
    Featurize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        audio_dir: Option<PathBuf>,
        /// Manifests listing the clips to featurize (default: every .wav).
        #[arg(long, num_args = 1..)]
        manifest: Vec<PathBuf>,
        /// Manifests whose clips define the normalization statistics
        /// (default: every featurized clip).
        #[arg(long, num_args = 1..)]
        stats_manifest: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Scope::Global)]
        scope: Scope,
    },
    /// Train one stage of the mean-teacher pipeline.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: u32,
        #[arg(long, num_args = 1..)]
        pseudo_labels: Vec<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Produce strong pseudo-labels from an ensemble of checkpoints.
    Pseudolabel {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        manifest: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = PseudoMode::InDomain)]
        mode: PseudoMode,
    },
    /// Decode ensemble predictions into a strong TSV.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        manifest: Vec<PathBuf>,
        /// Also write frame probabilities as JSONL.
        #[arg(long)]
        probs: Option<PathBuf>,
    },
    /// Average prediction files (JSONL) clip by clip.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Also decode the average into a strong TSV.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Score estimated events against a reference.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "ref", required = true)]
        reference: PathBuf,
        #[arg(long, required = true)]
        est: PathBuf,
        #[arg(long, value_enum, default_value_t = MatchingArg::Greedy)]
        matching: MatchingArg,
    },
}

/// Run one command line (`argv[0]` is the program name) and return the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_DATA
            }
        }
    }
}
