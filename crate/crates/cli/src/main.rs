mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Failure;

#[derive(Parser, Debug)]
#[command(name = "meshrecon", version, about = "Mesh recovery from images: data, losses, training and evaluation")]
struct Cli {
    /// Worker threads for parallel stages (1 gives fully deterministic scheduling).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON config file; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the fully resolved config as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of rendered images and deformed meshes.
    Synth(commands::SynthArgs),
    /// Compute per-vertex descriptors of a mesh.
    Shot(commands::ShotArgs),
    /// Evaluate every composite loss term between two meshes.
    Loss(commands::LossArgs),
    /// Run the registered finite-difference gradient checks.
    Gradcheck(commands::GradcheckArgs),
    /// Fit mesh vertex positions to a target by gradient descent.
    Fit(commands::FitArgs),
    /// Train the coupled image-to-mesh model.
    TrainCond(commands::TrainCondArgs),
    /// Train the unpaired cycle model.
    TrainCycle(commands::TrainCycleArgs),
    /// Train the mesh enhancer on coarse/fine pairs.
    TrainEnhancer(commands::TrainEnhancerArgs),
    /// Expand a coarse mesh with a trained enhancer.
    Upsample(commands::UpsampleArgs),
    /// Score a trained coupled model on a dataset split.
    Eval(commands::EvalArgs),
    /// Train one coupled model per loss-ablation row.
    Ablate(commands::AblateArgs),
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::runtime(anyhow::anyhow!(e)))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Shot(a) => commands::shot(a),
        Command::Loss(a) => commands::loss(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Fit(a) => commands::fit(a),
        Command::TrainCond(a) => commands::train_cond(a),
        Command::TrainCycle(a) => commands::train_cycle(a),
        Command::TrainEnhancer(a) => commands::train_enhancer(a),
        Command::Upsample(a) => commands::upsample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
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
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            if let Some(dir) = &f.diagnostics {
                eprintln!("diagnostics: {}", dir.display());
            }
            ExitCode::from(f.code)
        }
    }
}
