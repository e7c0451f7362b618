use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod cmd_eval;
mod cmd_match;
mod cmd_synth;
mod cmd_viz;
mod config;
mod error;
mod inputs;

#[derive(Parser)]
#[command(
    name = "sem",
    version,
    about = "Structured epipolar matching on two calibrated views"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match two images or feature pyramids and write matches plus a run report.
    Match(cmd_match::MatchArgs),
    /// Generate a synthetic two-view scene with ground truth.
    Synth(cmd_synth::SynthArgs),
    /// Score predicted matches against scene ground truth.
    Eval(cmd_eval::EvalArgs),
    /// Draw matches and epipolar bands as SVG.
    Viz(cmd_viz::VizArgs),
    /// Write a parameter file with seeded weights.
    Params(ParamsArgs),
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, env = "SEM_SEED", default_value_t = inputs::BUILTIN_PARAM_SEED)]
    seed: u64,
    #[arg(long, default_value_t = inputs::BUILTIN_PARAM_GAIN)]
    gain: f64,
    #[arg(long)]
    out: PathBuf,
}

fn write_params(args: &ParamsArgs) -> error::CliResult<()> {
    let store = sem_core::params::ParamStore::seeded(&sem_core::params::ModelSpec::default(), args.seed, args.gain);
    let mut buf = Vec::new();
    store.write_to(&mut buf).map_err(error::CliError::from_run)?;
    inputs::write(&args.out, buf)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Match(a) => cmd_match::run(a),
        Command::Synth(a) => cmd_synth::run(a),
        Command::Eval(a) => cmd_eval::run(a),
        Command::Viz(a) => cmd_viz::run(a),
        Command::Params(a) => write_params(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sem: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
