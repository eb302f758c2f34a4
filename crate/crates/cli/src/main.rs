//! `mimetic`: generate, inspect and exercise structured attention
//! initializations from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

mod commands;
mod output;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Exit status for rejected input or I/O failure.
const EXIT_VALIDATION: u8 = 1;
/// Exit status when the numerics fail (divergence, non-convergence, a
/// gradient check over tolerance).
const EXIT_NUMERIC: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "mimetic", version, about = "Structured self-attention initialization tools")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalOpts {
    /// Seed for every random draw; printed so runs can be repeated.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving every output and the run manifest.
    #[arg(long, global = true, env = "MIMETIC_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for sweeps and multi-seed runs. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an initialized checkpoint.
    Gen(GenArgs),
    /// Diagonal structure of the attention products in a checkpoint.
    Inspect(InspectArgs),
    /// Achieved (alpha, beta) over a grid of construction targets.
    Sweep(SweepArgs),
    /// Predicted versus Monte-Carlo attention logits.
    Expect(ExpectArgs),
    /// Train the toy classifier.
    Train(TrainArgs),
    /// Finite-difference check of the toy model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    VitTinyCifar,
    VitTinyImagenet,
    Lang,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Svd,
    Equal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SignArg {
    Negative,
    Positive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PosEmbedArg {
    Sinusoidal,
    Random,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value_t = Preset::VitTinyCifar)]
    preset: Preset,
    /// Output file, relative to --out-dir unless absolute.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Svd)]
    method: MethodArg,
    /// Overrides the preset's sign of the value/projection identity term.
    #[arg(long, value_enum)]
    vp_sign: Option<SignArg>,
    /// Split the value/projection SVD as W_V = UΣ, W_proj = (VΣ^½)ᵀ.
    #[arg(long)]
    as_written: bool,
    /// Also emit conventionally initialized non-attention tensors.
    #[arg(long)]
    full: bool,
    /// Conventional N(0, 0.02²) attention weights instead of mimetic ones.
    #[arg(long)]
    baseline: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Checkpoint path; tried as given, then under --out-dir.
    path: PathBuf,
    /// Top-left crop of every heatmap.
    #[arg(long, default_value_t = 64)]
    clip: usize,
    #[arg(long)]
    no_heatmaps: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Equal)]
    method: MethodArg,
    #[arg(long, default_value_t = 192)]
    d: usize,
    #[arg(long, default_value_t = 64)]
    k: usize,
    /// Scales for the equal-matrix sweep (default 20); points per side
    /// of the unit square for the SVD sweep (default 5).
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Debug, Args)]
struct ExpectArgs {
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Tokens.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 20_000)]
    trials: usize,
    #[arg(long, default_value_t = 0.7)]
    alpha: f64,
    #[arg(long, default_value_t = 0.7)]
    beta: f64,
    /// Position-embedding scale.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, value_enum, default_value_t = PosEmbedArg::Sinusoidal)]
    pos_embed: PosEmbedArg,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value = "mimetic", value_parser = commands::parse_init_mode)]
    init_mode: mimetic::toytrain::InitMode,
    #[arg(long, default_value_t = 800)]
    steps: usize,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Check one mode; every mode when omitted.
    #[arg(long, value_parser = commands::parse_init_mode)]
    init_mode: Option<mimetic::toytrain::InitMode>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            if e.use_stderr() && e.kind() != clap::error::ErrorKind::MissingSubcommand {
                eprintln!();
                let _ = Cli::command().print_help();
            }
            return ExitCode::from(code);
        }
    };
    eprintln!("seed: {}", cli.global.seed);
    match commands::run(&cli) {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::NumericFailure) => ExitCode::from(EXIT_NUMERIC),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(EXIT_NUMERIC)
            } else {
                ExitCode::from(EXIT_VALIDATION)
            }
        }
    }
}
