//! `leakgen` command-line experiment runner.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use leakgen::config::OUT_DIR_ENV;

/// Exit code for a training run aborted by a non-finite value.
pub const EXIT_NON_FINITE: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "leakgen",
    version,
    about = "Adversarial text generation with leaked discriminator features"
)]
pub struct Cli {
    /// Config file of `key = value` lines
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Base preset: table1-20, table1-40 or desk
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", env = OUT_DIR_ENV, default_value = "runs")]
    pub out: PathBuf,
    /// Overrides any config key (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Directory holding vocab.txt, train.txt, test.txt and oracle.ckpt
    /// (defaults to the output directory)
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Generator checkpoint (defaults to OUT/generator.ckpt)
    #[arg(long, value_name = "PATH")]
    pub generator: Option<PathBuf>,
    /// Discriminator checkpoint (defaults to OUT/discriminator.ckpt)
    #[arg(long, value_name = "PATH")]
    pub discriminator: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Builds the synthetic oracle and writes its training and test sequences
    OracleGen,
    /// Interleaved discriminator/generator pre-training
    Pretrain(DataArgs),
    /// Full training; with --generator and --discriminator, adversarial phase only
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Pre-trained generator checkpoint
        #[arg(long, value_name = "PATH", requires = "discriminator")]
        generator: Option<PathBuf>,
        /// Pre-trained discriminator checkpoint
        #[arg(long, value_name = "PATH", requires = "generator")]
        discriminator: Option<PathBuf>,
    },
    /// Writes generated sentences, one per line
    Sample(ModelArgs),
    /// Oracle NLL of generator samples
    EvalNll {
        #[command(flatten)]
        models: ModelArgs,
        /// Oracle checkpoint (defaults to DATA/oracle.ckpt)
        #[arg(long, value_name = "PATH")]
        oracle: Option<PathBuf>,
    },
    /// Corpus BLEU-2..5 of a candidate file against a reference file
    EvalBleu {
        #[arg(long, value_name = "PATH")]
        candidates: PathBuf,
        #[arg(long, value_name = "PATH")]
        references: PathBuf,
        /// Second candidate set; adds a relative-gain-by-length curve
        #[arg(long, value_name = "PATH")]
        baseline: Option<PathBuf>,
        /// BLEU order of the gain curve
        #[arg(long, default_value_t = 4)]
        order: usize,
    },
    /// Feature traces of generated sentences in the real-data PCA plane
    Trace(ModelArgs),
    /// Manager×Worker interaction products per generated token
    Interact(ModelArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                leakgen::Error::NonFinite { .. } => ExitCode::from(EXIT_NON_FINITE),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
