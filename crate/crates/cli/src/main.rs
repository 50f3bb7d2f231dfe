//! `tdk` command-line tool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tdk_core::env::{Axis, Direction};

use commands::CliError;

#[derive(Parser)]
#[command(name = "tdk", version, about = "Tendon-driven hand toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct TargetArgs {
    /// Rotation axis in the hand frame.
    #[arg(long, value_parser = ["x", "y", "z"])]
    pub axis: Option<String>,
    /// Rotation direction about the axis.
    #[arg(long, value_parser = ["pos", "neg"])]
    pub direction: Option<String>,
}

impl TargetArgs {
    pub fn axis(&self) -> Option<Axis> {
        self.axis.as_deref().map(|s| s.parse().expect("validated by clap"))
    }

    pub fn direction(&self) -> Option<Direction> {
        self.direction.as_deref().map(|s| s.parse().expect("validated by clap"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy with PPO; writes policy.json and train.csv.
    Train {
        /// Run config file, or a built-in name (`toy`, `ball`).
        #[arg(long, default_value = "ball")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the iteration count from the config.
        #[arg(long)]
        iterations: Option<u64>,
        #[command(flatten)]
        target: TargetArgs,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll a policy out in simulation; writes a trajectory CSV.
    Rollout {
        #[arg(long)]
        policy: PathBuf,
        /// Policy steps per env.
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        envs: usize,
        /// Run config for the environment (file or built-in name).
        #[arg(long, default_value = "ball")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample actions from the Gaussian head instead of using the mean.
        #[arg(long)]
        sample: bool,
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rotation statistics of a trajectory CSV; writes stats JSON and a
    /// plot-ready series CSV.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
        /// Smoothing factor for the series.
        #[arg(long, default_value_t = tdk_core::stats::DEFAULT_ALPHA)]
        alpha: f64,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a motor-angle log through the EKF; writes joint estimates.
    Estimate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Control loop config (noise levels, calibration pose).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate against the simulated motors at the known pose; writes a
    /// calibration JSON.
    CalibrateSim {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve simulated motors over the line protocol.
    ServeBridge {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Fraction of the way to the target the motors move per read.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Stop after this many seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Run the closed control loop; writes telemetry CSV.
    RunLoop {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Bridge address; simulated motors when absent.
        #[arg(long)]
        connect: Option<String>,
        /// Number of ticks.
        #[arg(long, default_value_t = 100)]
        steps: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            seed,
            iterations,
            target,
            out,
        } => commands::train(&config, seed, iterations, &target, out),
        Command::Rollout {
            policy,
            steps,
            envs,
            config,
            seed,
            sample,
            target,
            out,
        } => commands::rollout(&policy, steps, envs, &config, seed, sample, &target, out),
        Command::Eval {
            input,
            target,
            alpha,
            out,
        } => commands::eval(&input, &target, alpha, out),
        Command::Estimate { input, config, out } => commands::estimate(&input, config.as_deref(), out),
        Command::CalibrateSim { config, out } => commands::calibrate_sim(config.as_deref(), out),
        Command::ServeBridge { addr, alpha, duration } => commands::serve_bridge(&addr, alpha, duration),
        Command::RunLoop {
            policy,
            config,
            connect,
            steps,
            out,
        } => commands::run_loop(&policy, config.as_deref(), connect.as_deref(), steps, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
