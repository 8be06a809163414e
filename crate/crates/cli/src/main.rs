use anyhow::Result;
use binlow_cli::{commands, config};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Binary neural network training with low-cost backward propagation,
/// plus memory-footprint and energy analysis.
#[derive(Parser)]
#[command(name = "binlow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model per the config and write metrics, trace and checkpoint.
    Train(RunArgs),
    /// Static memory-footprint report for the configured scheme.
    Analyze(RunArgs),
    /// Per-batch energy estimate under the cost model.
    Energy(RunArgs),
    /// Compute gradient/noise density series from a run directory.
    Density {
        /// Run directory holding gradsnap.csv.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scheme with a named preset (standard | proposed).
    #[arg(long)]
    preset: Option<String>,
}

fn load_experiment(args: &RunArgs) -> Result<config::Experiment> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| anyhow::anyhow!("reading config {}: {e}", args.config.display()))?;
    let mut exp = config::parse(&text)?;
    if let Some(out) = &args.out {
        exp.raw.run.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        exp.raw.run.seed = seed;
    }
    if let Some(preset) = &args.preset {
        exp = override_preset(exp, preset)?;
    }
    Ok(exp)
}

fn override_preset(mut exp: config::Experiment, preset: &str) -> Result<config::Experiment> {
    use binlow_core::layers::Scheme;
    exp.scheme = match preset {
        "standard" => Scheme::standard(),
        "proposed" => Scheme::proposed(),
        other => anyhow::bail!("unknown preset: {other} (standard | proposed)"),
    };
    Ok(exp)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let exp = load_experiment(&args)?;
            commands::cmd_train(&exp)?;
        }
        Command::Analyze(args) => {
            let exp = load_experiment(&args)?;
            commands::cmd_analyze(&exp)?;
        }
        Command::Energy(args) => {
            let exp = load_experiment(&args)?;
            commands::cmd_energy(&exp)?;
        }
        Command::Density { run } => {
            commands::cmd_density(&run)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(binlow_cli::exit_code_of(&err))
        }
    }
}
