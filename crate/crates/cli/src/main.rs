use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::{FileConfig, InputError, RunConfig, SimulateConfig, TrajectoryKind};

/// Camera velocities from depth and IMU data over a sliding window.
#[derive(Debug, Parser)]
#[command(name = "rgbdi-flow", version)]
struct Cli {
    /// TOML file giving defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic sequence with IMU and ground truth.
    Simulate(SimulateArgs),
    /// Evaluate the estimator over every subsequence of a sequence.
    Run(RunArgs),
    /// Export the rigid velocity field of one solved frame.
    Flowfield(FlowfieldArgs),
    /// Summarize the results of one or more runs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        s == Switch::On
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of depth frames.
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// random, orbit or static.
    #[arg(long)]
    trajectory: Option<TrajectoryKind>,
    /// Scene file (`plane nx ny nz d`, `box cx cy cz ex ey ez`); the
    /// built-in room otherwise.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Standard deviation of additive depth noise (cm).
    #[arg(long)]
    depth_noise: Option<f64>,
}

#[derive(Debug, Args)]
struct EstimatorArgs {
    /// Sequence directory.
    data: Option<PathBuf>,
    /// Window length N (2 to 5).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    imu: Option<Switch>,
    #[arg(long)]
    marginalize: Option<Switch>,
    /// Maximum number of pyramid levels.
    #[arg(long)]
    pyramid: Option<usize>,
    /// Frames processed before the scored window (default N).
    #[arg(long)]
    history: Option<usize>,
    /// Range-flow residual noise in cm/s, or `estimated`.
    #[arg(long)]
    visual_noise: Option<String>,
    /// Depth images store ray length rather than z.
    #[arg(long)]
    euclidean_depth: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    est: EstimatorArgs,
    /// Frames between subsequence starts.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Debug, Args)]
struct FlowfieldArgs {
    #[command(flatten)]
    est: EstimatorArgs,
    /// Frame whose velocity field is exported.
    #[arg(long)]
    index: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Output directories of earlier runs.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

fn resolve_run(est: &EstimatorArgs, stride: Option<usize>, index: Option<usize>, file: &FileConfig) -> anyhow::Result<RunConfig> {
    let Some(data) = est.data.clone().or_else(|| file.data.clone()) else {
        config::input_bail!("no sequence directory given");
    };
    let frames = est.frames.or(file.frames).unwrap_or(3);
    let cfg = RunConfig {
        data,
        out: est.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
        frames,
        imu: est.imu.map(bool::from).or(file.imu).unwrap_or(true),
        marginalize: est.marginalize.map(bool::from).or(file.marginalize).unwrap_or(false),
        stride: stride.or(file.stride).unwrap_or(2),
        history: est.history.or(file.history).unwrap_or(frames),
        pyramid: est.pyramid.or(file.pyramid).unwrap_or(8),
        workers: est.workers.or(file.workers),
        visual_noise: est.visual_noise.clone().or_else(|| file.visual_noise.clone()).unwrap_or_else(|| "1".into()),
        euclidean_depth: est.euclidean_depth || file.euclidean_depth.unwrap_or(false),
        index: index.or(file.index),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_simulate(a: &SimulateArgs, file: &FileConfig) -> anyhow::Result<SimulateConfig> {
    let trajectory = match (&a.trajectory, &file.trajectory) {
        (Some(t), _) => *t,
        (None, Some(s)) => match s.parse() {
            Ok(t) => t,
            Err(e) => config::input_bail!("{e}"),
        },
        (None, None) => TrajectoryKind::Random,
    };
    let cfg = SimulateConfig {
        out: a.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("sequence")),
        length: a.length.or(file.length).unwrap_or(30),
        seed: a.seed.or(file.seed).unwrap_or(0),
        trajectory,
        scene: a.scene.clone().or_else(|| file.scene.clone()),
        depth_noise: a.depth_noise.or(file.depth_noise).unwrap_or(0.0),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    let file = match &cli.config {
        Some(p) => FileConfig::read(p).map_err(|e| anyhow::Error::new(InputError(format!("{e:#}"))))?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Simulate(a) => commands::simulate(&resolve_simulate(a, &file)?),
        Command::Run(a) => commands::run(&resolve_run(&a.est, a.stride, None, &file)?),
        Command::Flowfield(a) => {
            let cfg = resolve_run(&a.est, None, a.index, &file)?;
            let Some(index) = cfg.index else {
                config::input_bail!("--index is required");
            };
            commands::flowfield(&cfg, index)
        }
        Command::Report(a) => commands::report(&a.runs),
    }
}

fn is_input_error(e: &anyhow::Error) -> bool {
    use rgbdi_flow::Error as E;
    e.chain().any(|c| {
        c.is::<InputError>()
            || c.is::<std::io::Error>()
            || c.downcast_ref::<E>().is_some_and(|e| {
                matches!(
                    e,
                    E::Io { .. }
                        | E::Parse { .. }
                        | E::Image { .. }
                        | E::InvalidInput(_)
                        | E::NonMonotonic { .. }
                        | E::NonFinite(_)
                        | E::InvalidDepth(_)
                        | E::DimensionMismatch { .. }
                        | E::Empty(_)
                )
            })
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_input_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
