use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use quadlab::trajectory::TrajectoryKind;
use quadlab_cli::commands::{self, TuneOptions};
use quadlab_cli::config;
use quadlab_cli::CliError;

/// Quadrotor RL laboratory: navigation training, PID tuning, evaluation,
/// robustness sweeps and open-loop simulation.
#[derive(Debug, Parser)]
#[command(name = "quadlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file; unspecified keys keep their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Root seed; every random consumer derives its seed from it.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Dotted-key override applied after the file, e.g. `td3.learning_rate=0.002`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TrajectoryArg {
    Circle,
    Helix,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the navigation policy with TD3.
    TrainNav {
        #[command(flatten)]
        common: Common,
    },
    /// Tune the 18 PID gains with TD3 and score them on a trajectory.
    TunePid {
        #[command(flatten)]
        common: Common,
        /// Evaluation trajectory (default: the configured test trajectory).
        #[arg(long, value_enum)]
        trajectory: Option<TrajectoryArg>,
        /// Score these gains (PidParams18 JSON) instead of training.
        #[arg(long, value_name = "PATH")]
        gains: Option<PathBuf>,
    },
    /// Noise-free evaluation of a navigation checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Shorthand for `--override eval.episodes=N`.
        #[arg(long, value_name = "N")]
        episodes: Option<usize>,
    },
    /// Step-disturbance sweep of one checkpoint, optionally compared with a
    /// disturbance-trained one.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        disturbance_checkpoint: Option<PathBuf>,
    },
    /// Open-loop replay of rotor commands to a state CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, extra: Vec<String>) -> Result<config::RunConfig, CliError> {
    let mut overrides = common.overrides.clone();
    overrides.extend(extra);
    config::load(common.config.as_deref(), &overrides, common.seed)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let manifest = match cli.command {
        Command::TrainNav { common } => commands::train_nav(&resolve(&common, vec![])?, &common.out)?,
        Command::TunePid {
            common,
            trajectory,
            gains,
        } => {
            let opts = TuneOptions {
                trajectory: trajectory.map(|t| match t {
                    TrajectoryArg::Circle => TrajectoryKind::Circle,
                    TrajectoryArg::Helix => TrajectoryKind::Helix,
                }),
                gains,
            };
            commands::tune_pid(&resolve(&common, vec![])?, &opts, &common.out)?
        }
        Command::Eval {
            common,
            checkpoint,
            episodes,
        } => {
            let extra = episodes.map(|n| format!("eval.episodes={n}")).into_iter().collect();
            commands::eval(&resolve(&common, extra)?, &checkpoint, &common.out)?
        }
        Command::Robustness {
            common,
            checkpoint,
            disturbance_checkpoint,
        } => commands::robustness(
            &resolve(&common, vec![])?,
            &checkpoint,
            disturbance_checkpoint.as_deref(),
            &common.out,
        )?,
        Command::Simulate { common } => commands::simulate(&resolve(&common, vec![])?, &common.out)?,
    };
    log::info!("run {} wrote {} files", manifest.run_id, manifest.outputs.len() + 1);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QUADLAB_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
