//! `meki`: train, fold, verify and inspect memory-branch models.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meki::reparam::BankDType;
use meki::numerics::DType;

#[derive(Debug, Parser)]
#[command(name = "meki", version, about = "Token-indexed memory branch: training, folding and ROM bank tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on the synthetic fact corpus.
    Train(TrainArgs),
    /// Fold a checkpoint's memory branches into a ROM bank.
    Reparam(ReparamArgs),
    /// Compare training-path and bank-path logits; exit 0 iff within tolerance.
    Verify(VerifyArgs),
    /// Greedy generation through the bank path.
    Infer(InferArgs),
    /// Closed-form per-token cost of the memory branch.
    Cost(CostArgs),
    /// Train one model per memory width and fit the loss trend.
    Sweep(SweepArgs),
    /// Per-layer logit-lens KL against the final prediction.
    Lens(LensArgs),
    /// Bank file utilities.
    Bank {
        #[command(subcommand)]
        action: BankCommand,
    },
}

#[derive(Debug, Subcommand)]
enum BankCommand {
    /// Print header fields and per-layer checksums.
    Inspect {
        bank: PathBuf,
        /// Directory for the run manifest.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Flat `key = value` file with model, training and corpus fields.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the checkpoint, loss history and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `seed` in the config; drives init, batching and the corpus.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ReparamArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "f32")]
    dtype: BankDType,
    /// Bank file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Precision of both forward passes; defaults to f64 for f64 banks, else f32.
    #[arg(long)]
    dtype: Option<DType>,
    #[arg(long, default_value_t = 100)]
    sequences: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Downgrade a provenance mismatch to a warning.
    #[arg(long)]
    allow_mismatch: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Prompt token ids, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    tokens: Vec<usize>,
    /// Number of tokens to generate.
    #[arg(long, default_value_t = 8)]
    greedy: usize,
    #[arg(long)]
    allow_mismatch: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[arg(long)]
    config: PathBuf,
    /// Bank element type used for the ROM traffic figure.
    #[arg(long, default_value = "f16")]
    dtype: BankDType,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    dmem: Vec<usize>,
    /// Seeds averaged per width; defaults to the single `--seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct LensArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Second checkpoint reported alongside, usually the baseline.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Corpus settings; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 320)]
    sequences: usize,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("MEKI_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("MEKI_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Reparam(a) => commands::reparam(a),
        Command::Verify(a) => commands::verify(a),
        Command::Infer(a) => commands::infer(a),
        Command::Cost(a) => commands::cost(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Lens(a) => commands::lens(a),
        Command::Bank {
            action: BankCommand::Inspect { bank, out_dir },
        } => commands::bank_inspect(&bank, &out_dir),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
