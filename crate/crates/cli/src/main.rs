mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selafd::peft::FineTuneMode;

#[derive(Parser, Debug)]
#[command(name = "selafd", version, about = "LoRA + serial/parallel adapter fine-tuning of a ViT on radar Time-Doppler maps")]
struct Cli {
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a balanced synthetic corpus of CW radar recordings.
    Synth(SynthArgs),
    /// Compute Time-Doppler maps of a corpus (or raw recordings) and export them.
    Spectrogram(SpectrogramArgs),
    /// Train one fine-tuning mode.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train and evaluate all five modes from one base checkpoint.
    Ablate(AblateArgs),
    /// Export class-token attention maps as graymaps.
    ExportAttn(ExportAttnArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub per_class: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 10.0)]
    pub snr_db: f64,
    #[arg(long, default_value_t = 3.0)]
    pub duration_s: f64,
    #[arg(long, default_value_t = 500.0)]
    pub sample_rate: f64,
    /// `activity` (six classes) or `distractor` (four pretraining classes).
    #[arg(long, default_value = "activity")]
    pub task: selafd::dataset::Task,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Key=value config file with [train], [peft], [model] and [data] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Small CI model (image 32, patch 8, dim 64, depth 4, heads 4).
    #[arg(long, conflicts_with = "base")]
    pub tiny: bool,
    /// ViT-B/16 at 224.
    #[arg(long)]
    pub base: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Write wall_ms=0 in training logs so reruns are byte-identical.
    #[arg(long)]
    pub deterministic_timing: bool,
}

#[derive(Args, Debug)]
pub struct SpectrogramArgs {
    /// Corpus directory with manifest.tsv, or a raw directory with --ingest-config.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ingestion config ([ingest] format, header_lines, sample_rate, extension, label.<substring>).
    #[arg(long)]
    pub ingest_config: Option<PathBuf>,
    /// Also write one PGM per map.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: FineTuneMode,
    #[arg(long)]
    pub out: PathBuf,
    /// Backbone to fine-tune; without it a freshly initialized backbone is used.
    #[arg(long)]
    pub base_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub base_checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct ExportAttnArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Samples exported per class, taken in manifest order.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub per_class: u64,
    /// Block to show; defaults to the last.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Head to show; defaults to the mean over heads.
    #[arg(long)]
    pub head: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

fn parse_mode(s: &str) -> Result<FineTuneMode, String> {
    s.parse::<FineTuneMode>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Spectrogram(a) => commands::spectrogram(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::ExportAttn(a) => commands::export_attn(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
