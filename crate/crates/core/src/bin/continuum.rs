use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use continuum::experiments::{run, Command, ExperimentSpec, DEFAULT_SIGMAS};
use continuum::gradcheck::Fault;
use continuum::unet::BlockKind;

#[derive(Parser)]
#[command(name = "continuum", version, about = "Continuous U-Net experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// JSON file with `unet`, `train` and `data` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Comma-separated run seeds; overrides `train.seed`.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fitted convergence orders of every solver on the test problems.
    SolverBench,
    Train,
    /// Per-sample metrics of a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    NoiseBench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIGMAS)]
        sigmas: Vec<f64>,
    },
    BlockCompare {
        #[arg(long, value_delimiter = ',', default_values_t = BlockKind::ALL)]
        kinds: Vec<BlockKind>,
    },
    /// Finite-difference and oracle checks of every gradient path.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_adjoint_sign: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.cmd {
        Cmd::SolverBench => Command::SolverBench,
        Cmd::Train => Command::Train,
        Cmd::Eval { checkpoint } => Command::Eval { checkpoint },
        Cmd::NoiseBench { checkpoint, sigmas } => Command::NoiseBench { checkpoint, sigmas },
        Cmd::BlockCompare { kinds } => Command::BlockCompare { kinds },
        Cmd::Gradcheck { corrupt_adjoint_sign } => Command::Gradcheck {
            fault: corrupt_adjoint_sign.then_some(Fault::AdjointSign),
        },
    };
    let spec = ExperimentSpec {
        command,
        config: cli.config,
        out: cli.out,
        seeds: cli.seeds,
    };
    match run(&spec) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 1 } else { 2 })
        }
    }
}
