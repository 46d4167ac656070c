//! `effattn`: generate, decompose, analyze, and benchmark attention heads.

mod analyze;
mod commands;
mod failure;
mod select;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::{CliResult, Failure};
use select::{parse_index_set, IndexSet};

#[derive(Debug, Parser)]
#[command(name = "effattn", version, about = "Effective-attention decomposition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a bundle of synthetic attention heads.
    Synth(SynthArgs),
    /// Replace each head's attention with its effective attention and
    /// verify the decomposition.
    Decompose(DecomposeArgs),
    /// Run one of the attention analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Time a forward pass with and without the decomposition.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Standard,
    Effective,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Cls,
    Sep,
}

#[derive(Debug, Args)]
pub struct Filters {
    /// Layers to include, e.g. `0,3-5`.
    #[arg(long, value_parser = parse_index_set)]
    pub layers: Option<IndexSet>,
    /// Heads to include, e.g. `0-11`.
    #[arg(long, value_parser = parse_index_set)]
    pub heads: Option<IndexSet>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Bundle file to write.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sequence length d_s.
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 768)]
    pub d_model: usize,
    /// Query/key dimension.
    #[arg(long, default_value_t = 64)]
    pub d_k: usize,
    #[arg(long, default_value_t = 64)]
    pub d_v: usize,
    /// Number of heads in the sublayer.
    #[arg(long, default_value_t = 12)]
    pub n_heads: usize,
    /// Number of input examples.
    #[arg(long, default_value_t = 1)]
    pub examples: usize,
    #[arg(long, default_value = "synthetic")]
    pub task: String,
    #[arg(long, default_value = "pretrained")]
    pub tag: String,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    pub precision: PrecisionArg,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Bundle file receiving the effective-attention records.
    #[arg(long)]
    pub output: PathBuf,
    /// Relative singular-value tolerance; defaults to the bundle precision's.
    #[arg(long, allow_hyphen_values = true)]
    pub tolerance: Option<f64>,
    /// Zero-pad every record to this sequence length first.
    #[arg(long)]
    pub pad_to: Option<usize>,
    /// Verification summary path (default: `<output>.verify.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub filters: Filters,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Directory receiving the reports.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Both)]
    pub kind: KindArg,
    #[arg(long, allow_hyphen_values = true)]
    pub tolerance: Option<f64>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    #[command(flatten)]
    pub filters: Filters,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Weight the CLS position gives each token category in the final layer.
    Tokens(AnalyzeArgs),
    /// Classify every head into the pattern taxonomy.
    Patterns {
        #[command(flatten)]
        common: AnalyzeArgs,
        /// Pattern threshold file (TOML); defaults to the built-in rules.
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Per-head cosine similarity between two checkpoints.
    FinetuneDiff {
        #[command(flatten)]
        common: AnalyzeArgs,
        /// Second (finetuned) bundle.
        #[arg(long)]
        input_b: PathBuf,
    },
    /// Per-head attention to the CLS or SEP token.
    TokenMap {
        #[command(flatten)]
        common: AnalyzeArgs,
        #[arg(long, value_enum)]
        target: TargetArg,
    },
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 768)]
    pub d_model: usize,
    #[arg(long, default_value_t = 64)]
    pub d_k: usize,
    #[arg(long, default_value_t = 64)]
    pub d_v: usize,
    #[arg(long, default_value_t = effattn::bench::MIN_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = effattn::bench::MIN_ITERATIONS)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, allow_hyphen_values = true)]
    pub tolerance: Option<f64>,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Validates a user-supplied tolerance.
pub fn check_tolerance(t: Option<f64>) -> CliResult<Option<f64>> {
    match t {
        Some(t) if !(t > 0.0 && t.is_finite()) => Err(Failure::argument(format!("--tolerance must be > 0, got {t}"))),
        other => Ok(other),
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("EFFATTN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::argument(format!("EFFATTN_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::argument(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(args) => commands::synth(&args),
        Command::Decompose(args) => commands::decompose(&args),
        Command::Analyze(cmd) => analyze::run(&cmd),
        Command::Bench(args) => commands::bench(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("effattn: {f}");
            ExitCode::from(f.code)
        }
    }
}
