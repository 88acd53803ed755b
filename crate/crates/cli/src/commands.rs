use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use log::info;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgbdi_flow::datasets::{
    export_sequence, load_sequence, Calibration, LoadOptions, Reference, SequenceBundle, TUM_DEPTH_SCALE,
};
use rgbdi_flow::geom::{so3_exp, Pose, TimedPose};
use rgbdi_flow::metrics::{aggregate, parse_subsequence_csv};
use rgbdi_flow::pipeline::{evaluate_with, precompute, solve_window_ending, state_csv, RunOptions};
use rgbdi_flow::rangeflow::rigid_velocity_field;
use rgbdi_flow::sim::{
    fit_spline, orbit_trajectory, random_trajectory, simulate_sequence, SceneModel, SimConfig, TrajectorySpline,
};

use crate::config::{input_bail, parse_visual_noise, RunConfig, SimulateConfig, TrajectoryKind};

/// Exit code when no subsequence had usable geometry.
const EXIT_DEGENERATE: u8 = 3;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn echo<T: serde::Serialize>(cfg: &T, out: &Path) -> Result<()> {
    let text = toml::to_string(cfg).context("serializing configuration")?;
    for line in text.lines() {
        info!("config: {line}");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.toml"), &text)
}

fn trajectory(cfg: &SimulateConfig, duration: f64) -> Result<TrajectorySpline> {
    Ok(match cfg.trajectory {
        TrajectoryKind::Random => random_trajectory(duration, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
        TrajectoryKind::Orbit => orbit_trajectory(&Vector3::new(0.0, -10.0, 220.0), 60.0, 0.5, -0.3, duration)?,
        TrajectoryKind::Static => {
            let pose = Pose::new(so3_exp(&Vector3::new(-0.3, 0.0, 0.0)), Vector3::new(0.0, -20.0, 0.0));
            let poses: Vec<TimedPose> = (0..4)
                .map(|k| TimedPose {
                    timestamp: k as f64 * duration / 3.0,
                    pose,
                })
                .collect();
            fit_spline(&poses)?
        }
    })
}

pub fn simulate(cfg: &SimulateConfig) -> Result<ExitCode> {
    echo(cfg, &cfg.out)?;
    let scene = match &cfg.scene {
        Some(p) => SceneModel::read(p)?,
        None => SceneModel::desk_room(),
    };
    let sim_cfg = SimConfig {
        frames: cfg.length,
        depth_noise: cfg.depth_noise,
        seed: cfg.seed,
        ..SimConfig::default()
    };
    let duration = (cfg.length - 1) as f64 / sim_cfg.camera_rate + 0.5;
    let seq = simulate_sequence(&scene, &trajectory(cfg, duration)?, &sim_cfg)?;
    let bundle = SequenceBundle {
        frames: seq.frames,
        imu: seq.imu,
        groundtruth: Some(seq.groundtruth),
        calibration: Calibration {
            intrinsics: sim_cfg.intrinsics,
            depth_scale: TUM_DEPTH_SCALE,
        },
        reference: Reference {
            gravity: Some(seq.gravity),
            bias: Some(seq.bias),
        },
    };
    export_sequence(&cfg.out, &bundle)?;
    write(&cfg.out.join("scene.txt"), &scene.to_text())?;
    info!(
        "wrote {} frames and {} IMU samples to {}",
        bundle.frames.len(),
        bundle.imu.len(),
        cfg.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_options(cfg: &RunConfig) -> Result<RunOptions> {
    let mut opts = RunOptions::new(cfg.frames);
    opts.estimator.marginalize = cfg.marginalize;
    opts.estimator.visual_noise = parse_visual_noise(&cfg.visual_noise)?;
    opts.use_imu = cfg.imu;
    opts.stride = cfg.stride;
    opts.history = cfg.history;
    opts.flow.max_levels = cfg.pyramid;
    opts.workers = cfg.workers;
    Ok(opts)
}

fn load(cfg: &RunConfig) -> Result<SequenceBundle> {
    Ok(load_sequence(
        &cfg.data,
        &LoadOptions {
            load_imu: cfg.imu,
            euclidean_depth: cfg.euclidean_depth,
        },
    )?)
}

pub fn run(cfg: &RunConfig) -> Result<ExitCode> {
    echo(cfg, &cfg.out)?;
    let opts = run_options(cfg)?;
    let bundle = load(cfg)?;
    if cfg.imu && bundle.imu.is_empty() {
        input_bail!("{} has no IMU data; use --imu off", cfg.data.display());
    }
    let meas = precompute(&bundle, &opts)?;
    let eval = evaluate_with(&bundle, &meas, &opts)?;

    let states = cfg.out.join("states");
    fs::create_dir_all(&states).with_context(|| format!("creating {}", states.display()))?;
    let mut degenerate = String::new();
    for r in &eval.runs {
        match (&r.degenerate, &r.state) {
            (Some(reason), _) => {
                let _ = writeln!(degenerate, "{} {} {}", r.index, r.start_frame, reason);
            }
            (None, Some(state)) => write(&states.join(format!("{:04}.csv", r.index)), &state_csv(state))?,
            (None, None) => {}
        }
    }
    write(&cfg.out.join("degenerate.txt"), &degenerate)?;
    let summary = match &eval.metrics {
        Some(m) => {
            write(&cfg.out.join("subsequences.csv"), &m.to_csv())?;
            m.to_text()
        }
        None => format!(
            "subsequences = {}\ndegenerate = {}\n",
            eval.runs.len(),
            eval.degenerate_count()
        ),
    };
    write(&cfg.out.join("metrics.txt"), &summary)?;
    print!("{summary}");
    if eval.all_degenerate() {
        log::error!("every subsequence was degenerate");
        return Ok(ExitCode::from(EXIT_DEGENERATE));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn flowfield(cfg: &RunConfig, index: usize) -> Result<ExitCode> {
    echo(cfg, &cfg.out)?;
    let opts = run_options(cfg)?;
    let bundle = load(cfg)?;
    if index == 0 || index >= bundle.frames.len() {
        input_bail!("--index must lie in 1..{}", bundle.frames.len());
    }
    let meas = precompute(&bundle, &opts)?;
    let run = solve_window_ending(&meas, &opts, index)?;
    let (Some(state), None) = (&run.state, &run.degenerate) else {
        log::error!(
            "frame {index}: {}",
            run.degenerate.as_deref().unwrap_or("no solution")
        );
        return Ok(ExitCode::from(EXIT_DEGENERATE));
    };
    let twist = state.frames.last().expect("solved window is non-empty").twist();
    let mut csv = String::from("x,y,z,vx,vy,vz\n");
    for (p, v) in rigid_velocity_field(&bundle.frames[index], &twist) {
        let _ = writeln!(csv, "{:.6},{:.6},{:.6},{:.9e},{:.9e},{:.9e}", p.x, p.y, p.z, v.x, v.y, v.z);
    }
    write(&cfg.out.join("flowfield.csv"), &csv)?;
    println!(
        "v = ({:.6}, {:.6}, {:.6}) cm/s, w = ({:.6}, {:.6}, {:.6}) rad/s",
        twist[0], twist[1], twist[2], twist[3], twist[4], twist[5]
    );
    Ok(ExitCode::SUCCESS)
}

pub fn report(runs: &[PathBuf]) -> Result<ExitCode> {
    for dir in runs {
        let csv = dir.join("subsequences.csv");
        if !csv.exists() {
            input_bail!("{} has no subsequences.csv", dir.display());
        }
        let text = fs::read_to_string(&csv).with_context(|| format!("reading {}", csv.display()))?;
        let subs = parse_subsequence_csv(&text, &csv)?;
        let degenerate = fs::read_to_string(dir.join("degenerate.txt"))
            .map(|s| s.lines().filter(|l| !l.trim().is_empty()).count())
            .unwrap_or(0);
        if subs.is_empty() {
            input_bail!("{} lists no subsequences", csv.display());
        }
        if runs.len() > 1 {
            println!("[{}]", dir.display());
        }
        print!("{}", aggregate(&subs, degenerate)?.to_text());
    }
    Ok(ExitCode::SUCCESS)
}
