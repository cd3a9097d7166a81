mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Args, Parser, Subcommand};
use im2tex::Config;

static KEY_TABLE: LazyLock<String> = LazyLock::new(|| format!("Configuration keys:\n{}", Config::help_table()));

#[derive(Parser)]
#[command(name = "im2tex", version, about = "Translate formula images to LaTeX token sequences")]
#[command(after_help = KEY_TABLE.as_str())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Later sources win: built-in preset,
/// then `--config`, then `--set`.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Built-in defaults to start from: paper | desk
    #[arg(long, default_value = "paper")]
    pub preset: String,
    /// `key = value` file applied over the preset
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Single `key=value` override (repeatable)
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (PGM images plus a manifest)
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Write binary (P5) instead of plain (P2) images
        #[arg(long)]
        binary: bool,
    },
    /// Train in the mle or rl phase
    #[command(after_help = KEY_TABLE.as_str())]
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train: Option<PathBuf>,
        /// Validation manifest (defaults to the training manifest)
        #[arg(long)]
        val: Option<PathBuf>,
        /// Directory for checkpoints, the log and the effective config
        #[arg(long)]
        out: PathBuf,
        /// mle | rl
        #[arg(long)]
        phase: Option<String>,
        /// Starting weights for the rl phase
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue a run from its checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode images listed in a manifest
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Beam width (defaults to the `beam` key)
        #[arg(long, conflicts_with = "greedy")]
        beam: Option<usize>,
        #[arg(long)]
        greedy: bool,
        /// Output TSV (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against a reference manifest
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one attention heatmap per decoding step
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "greedy")]
        beam: Option<usize>,
        #[arg(long)]
        greedy: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { cfg, out, count, binary } => commands::gen_data(&cfg, &out, count, binary),
        Command::Train {
            cfg,
            train,
            val,
            out,
            phase,
            init,
            resume,
        } => commands::train(&commands::TrainArgs {
            cfg,
            train,
            val,
            out,
            phase,
            init,
            resume,
        }),
        Command::Predict {
            cfg,
            checkpoint,
            manifest,
            beam,
            greedy,
            out,
        } => commands::predict(&cfg, &checkpoint, &manifest, beam, greedy, out.as_deref()),
        Command::Evaluate {
            cfg,
            manifest,
            predictions,
            out,
        } => commands::evaluate(&cfg, &manifest, &predictions, out.as_deref()),
        Command::Inspect {
            cfg,
            checkpoint,
            image,
            out,
            beam,
            greedy,
        } => commands::inspect(&cfg, &checkpoint, &image, &out, beam, greedy),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
