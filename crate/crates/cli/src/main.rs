mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

/// Attention-based neural machine translation: data generation, training,
/// decoding, alignment export, evaluation, and gradient checks.
#[derive(Debug, Parser)]
#[command(name = "rnnsearch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic copy or reverse corpus.
    GenData(GenDataArgs),
    /// Train a model and write its best checkpoint.
    Train(TrainArgs),
    /// Translate a file of sentences, one per line.
    Translate(TranslateArgs),
    /// Export attention weights for one sentence as TSV and PGM.
    Align(AlignArgs),
    /// Score translations of a test corpus: BLEU and a length curve.
    Evaluate(EvaluateArgs),
    /// Compare tape gradients with finite differences at 64-bit.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// copy or reverse
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 20)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 8)]
    pub max_len: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub train_source: PathBuf,
    #[arg(long)]
    pub train_target: PathBuf,
    #[arg(long, requires = "dev_target")]
    pub dev_source: Option<PathBuf>,
    #[arg(long, requires = "dev_source")]
    pub dev_target: Option<PathBuf>,
    /// Best-dev checkpoint (final parameters without a dev set). The latest
    /// epoch, with optimizer state, goes to `<out>.last`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = 12)]
    pub beam: usize,
    /// Never emit the unknown-word symbol.
    #[arg(long)]
    pub no_unk: bool,
    #[arg(long, default_value_t = 100)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source sentence, whitespace-tokenized.
    #[arg(long)]
    pub source: String,
    /// Target sentence to teacher-force; decoded when absent.
    #[arg(long)]
    pub target: Option<String>,
    /// Writes `<prefix>.tsv` and `<prefix>.pgm`.
    #[arg(long)]
    pub out_prefix: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model used to translate the source side.
    #[arg(long, required_unless_present = "candidates", conflicts_with = "candidates")]
    pub checkpoint: Option<PathBuf>,
    /// Existing translations to score instead of decoding.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Inclusive upper edges of the source-length bins.
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50")]
    pub bins: Vec<usize>,
    /// bleu or token-accuracy
    #[arg(long, default_value = "bleu")]
    pub metric: String,
    /// Length-curve TSV output.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 6)]
    pub m: usize,
    #[arg(long, default_value_t = 4)]
    pub l: usize,
    #[arg(long, default_value_t = 7)]
    pub n_align: usize,
    /// Vocabulary size per side, reserved symbols included.
    #[arg(long, default_value_t = 11)]
    pub vocab: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// attention, fixed, or both
    #[arg(long, default_value = "both")]
    pub mode: String,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Translate(a) => commands::translate(&a),
        Command::Align(a) => commands::align(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rnnsearch: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
