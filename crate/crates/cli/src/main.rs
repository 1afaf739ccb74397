//! `nnwm`: embed, extract and attack weight watermarks from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nnwm::attacks::PruneOrder;
use nnwm::experiment::Situation;
use nnwm::watermark::KeyFamily;

#[derive(Debug, Parser)]
#[command(name = "nnwm", version, about = "Embed, extract and attack weight watermarks in small CNNs")]
pub struct Cli {
    /// Master seed for model initialization, shuffling and generated keys.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving all outputs.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Gradient workers; 1 (the default) is the bit-reproducible mode.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a key file.
    Keygen(KeygenArgs),
    /// Write the synthetic train and test sets.
    Dataset(DatasetArgs),
    /// Embed a watermark (train-, fine-tune- or distill-to-embed).
    Embed(EmbedArgs),
    /// Extract a watermark and print its detection statistics.
    Extract(MarkArgs),
    /// Attack an embedded watermark.
    #[command(subcommand)]
    Attack(AttackCommand),
    /// Write activation histograms of one or more models as CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    #[arg(long)]
    pub family: KeyFamily,
    /// Payload length T.
    #[arg(long)]
    pub bits: usize,
    /// Filter-mean length M; alternatively read it from --model and --layer.
    #[arg(long, conflicts_with = "model")]
    pub dim: Option<usize>,
    #[arg(long, requires = "layer")]
    pub model: Option<PathBuf>,
    /// Target layer recorded in the key file.
    #[arg(long)]
    pub layer: Option<String>,
    /// Store the full matrix, not just the seed.
    #[arg(long)]
    pub explicit: bool,
    /// Output file (default: <out-dir>/key.toml).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Template family; different domains are different tasks.
    #[arg(long)]
    pub domain: Option<u64>,
}

/// Where training and test data come from.
#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// Directory with train.nnwd and test.nnwd.
    #[arg(long, conflicts_with = "cifar")]
    pub data: Option<PathBuf>,
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long)]
    pub cifar: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub situation: Option<Situation>,
    #[arg(long)]
    pub family: Option<KeyFamily>,
    /// Payload length T (ignored when --payload or --key is given).
    #[arg(long)]
    pub bits: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Target convolution layer or group.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub key_seed: Option<u64>,
    /// Existing key file instead of a generated key.
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Payload file (default: all ones).
    #[arg(long)]
    pub payload: Option<PathBuf>,
    /// Trained model for fine-tune- and distill-to-embed.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args, Clone)]
pub struct MarkArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub key: PathBuf,
    /// Payload file (default: all ones of the key's length).
    #[arg(long)]
    pub payload: Option<PathBuf>,
    /// Layer override (default: the layer stored in the key file).
    #[arg(long)]
    pub layer: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum AttackCommand {
    /// Zero a fraction of the layer's weights and measure the damage.
    Prune {
        #[command(flatten)]
        mark: MarkArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "ascending,descending,random")]
        orders: Vec<PruneOrder>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Continue training without the regularizer.
    Finetune {
        #[command(flatten)]
        mark: MarkArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Embed second watermarks of the given lengths with a new key.
    Overwrite {
        #[command(flatten)]
        mark: MarkArgs,
        /// Attacker payload lengths T', one run each.
        #[arg(long, value_delimiter = ',')]
        bits: Vec<usize>,
        /// Target layers (default: the watermarked layer).
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        #[arg(long, default_value = "random")]
        family: KeyFamily,
        #[arg(long)]
        lambda: Option<f64>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a fresh model on the watermarked model's soft outputs.
    Distill {
        #[command(flatten)]
        mark: MarkArgs,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub model: Vec<PathBuf>,
    #[arg(long)]
    pub key: PathBuf,
    #[arg(long)]
    pub payload: Option<PathBuf>,
    #[arg(long)]
    pub layer: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
