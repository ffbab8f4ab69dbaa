mod commands;
mod overrides;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Imagined visual features: audio featurization, audio-visual training and
/// evaluation.
///
/// Any configuration key can be given as `--key value` (dashes or
/// underscores) and overrides the config file.
#[derive(Parser, Debug)]
#[command(name = "ivf", version)]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write one IVF1 feature file per WAV clip.
    Featurize {
        /// A WAV file or a directory of them.
        #[arg(long)]
        input: PathBuf,
        /// Output directory, or a file path when the input is one file.
        #[arg(long)]
        output: PathBuf,
    },
    /// Render a synthetic labeled audio-visual dataset.
    GenSynthetic {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 300)]
        count: usize,
        /// `seen` or `unseen` rendering conditions.
        #[arg(long, default_value = "seen")]
        split: String,
    },
    /// Stage A: train encoder, decoder, codebook, transformation network and
    /// critic on paired data.
    TrainAv {
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints and the loss log.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Stage B: train the classifier on the frozen transformation network.
    TrainClassifier {
        /// Stage-A checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Validation data for best-model selection.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Permute training and validation labels (null-model control).
        #[arg(long)]
        shuffle_labels: bool,
    },
    /// Print accuracy and write the confusion matrix.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Tag printed with the result.
        #[arg(long, default_value = "seen")]
        split: String,
        /// Confusion matrix CSV.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Write the K x d codebook prototypes as CSV.
    InspectCodebook {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let (rest, layer) = match overrides::split(&argv) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli, layer) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
