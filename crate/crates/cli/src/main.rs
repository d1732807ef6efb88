mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmsr_core::Error;

use commands::{AblateArgs, BenchArgs, DownsampleArgs, EvalArgs, GradcheckArgs, NoiseArgs, ReplayArgs, SrArgs, SynthArgs};

/// Guided cross-modal super-resolution trained online on each input pair.
#[derive(Parser)]
#[command(name = "mmsr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on one (source, guide) pair and write the super-resolved source.
    Sr(SrArgs),
    /// Re-emit an SR image from a run manifest and its checkpoint.
    Replay(ReplayArgs),
    /// Average-pool an image by an integer factor.
    Downsample(DownsampleArgs),
    /// Add seeded Gaussian noise (standard deviation on the 0..255 scale).
    Noise(NoiseArgs),
    /// Print the RMSE between two images in native units.
    Eval(EvalArgs),
    /// Write seeded synthetic (lr, guide, gt) triples.
    Synth(SynthArgs),
    /// Train variants on a directory of triples and tabulate mean RMSE.
    Ablate(AblateArgs),
    /// Compare fused and per-pixel modulation throughput.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Argument(_) | Error::Config(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Format { .. } => 3,
        Error::Training { .. } | Error::Numeric { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sr(a) => commands::sr(a),
        Command::Replay(a) => commands::replay(a),
        Command::Downsample(a) => commands::downsample(a),
        Command::Noise(a) => commands::noise(a),
        Command::Eval(a) => commands::eval(a),
        Command::Synth(a) => commands::synth(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Bench(a) => commands::bench(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("mmsr: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
