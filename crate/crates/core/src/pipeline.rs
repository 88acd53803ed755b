//! Subsequence evaluation: per-pair measurements, windowed solves and
//! metrics against ground truth.
//!
//! A subsequence starting at frame `s` first runs through `history` frames
//! (sliding the window, with or without marginalization) and is then scored
//! on the final window `s + history .. s + history + N`. Slot 0 of that
//! window carries no visual factor, so velocities are scored on slots
//! `1..N`; gravity is scored in slot 0's camera frame.
//!
//! The twist of a frame pair is the mean motion over the pair's interval,
//! so a slot's velocities refer to the middle of the interval that ends at
//! its frame (its *epoch*). Gyro readings, preintegration intervals and
//! ground truth all use epochs.

use std::fmt::Write as _;

use log::{debug, info};
use nalgebra::Vector3;
use rayon::prelude::*;

use crate::datasets::SequenceBundle;
use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimatorConfig, FrameInput, SolveReport, VisualFactor, WindowState};
use crate::geom::Rotation;
use crate::imu::{bucket_samples, interpolate_at, preintegrate, ImuBias, PreintegratedImu};
use crate::metrics::{aggregate, gravity_angle, rmse, MetricsReport, SubsequenceMetrics};
use crate::rangeflow::{estimate_twist, FlowParams};
use crate::sim::fit_spline;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub estimator: EstimatorConfig,
    /// Read the IMU stream; off gives the visual-only estimate.
    pub use_imu: bool,
    /// Frames between subsequence starts.
    pub stride: usize,
    /// Frames processed before the scored window.
    pub history: usize,
    pub flow: FlowParams,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl RunOptions {
    pub fn new(window: usize) -> Self {
        Self {
            estimator: EstimatorConfig {
                window,
                ..EstimatorConfig::default()
            },
            use_imu: true,
            stride: 2,
            history: window,
            flow: FlowParams::default(),
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidInput("stride must be at least 1".into()));
        }
        if self.estimator.window < 2 {
            return Err(Error::InvalidInput("window must hold at least 2 frames".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidInput("worker count must be at least 1".into()));
        }
        Ok(())
    }

    /// Frames consumed by one subsequence.
    pub fn span(&self) -> usize {
        self.history + self.estimator.window
    }
}

/// Measurements shared by every subsequence of a sequence. Entry `k` of
/// `visual` and `preint` belongs to the pair `(k, k + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub timestamps: Vec<f64>,
    pub epochs: Vec<f64>,
    pub visual: Vec<Option<VisualFactor>>,
    pub preint: Vec<Option<PreintegratedImu>>,
    pub gyro: Vec<Option<Vector3<f64>>>,
}

impl Measurements {
    pub fn frame_input(&self, k: usize) -> FrameInput {
        let mut f = FrameInput::new(self.timestamps[k]);
        f.gyro = self.gyro[k];
        if k > 0 {
            f.visual = self.visual[k - 1].clone();
            f.preint = self.preint[k - 1].clone();
        }
        f
    }
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Range flow for every consecutive frame pair and, with IMU, the
/// preintegrated deltas and per-frame gyro readings.
pub fn precompute(bundle: &SequenceBundle, opts: &RunOptions) -> Result<Measurements> {
    let frames = &bundle.frames;
    if frames.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least two frames, got {}", frames.len())));
    }
    let visual = with_pool(opts.workers, || {
        frames
            .par_windows(2)
            .map(|w| match estimate_twist(&w[0], &w[1], &opts.flow) {
                Ok(flow) => Ok(Some(VisualFactor::from_flow(&flow))),
                Err(Error::DegenerateSystem) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let timestamps: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
    let epochs = frame_epochs(&timestamps);
    let use_imu = opts.use_imu && !bundle.imu.is_empty();
    let preint = epochs
        .windows(2)
        .map(|w| {
            if !use_imu {
                return Ok(None);
            }
            match bucket_samples(&bundle.imu, w[0], w[1]) {
                Ok(s) => preintegrate(&s, &ImuBias::zero(), &opts.estimator.noise).map(Some),
                Err(Error::InvalidInput(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let gyro = epochs
        .iter()
        .map(|&t| if use_imu { interpolate_at(&bundle.imu, t).map(|s| s.gyro) } else { None })
        .collect();
    Ok(Measurements {
        timestamps,
        epochs,
        visual,
        preint,
        gyro,
    })
}

/// Midpoints of the intervals ending at each frame; the first frame keeps
/// its own timestamp.
pub fn frame_epochs(timestamps: &[f64]) -> Vec<f64> {
    (0..timestamps.len())
        .map(|k| if k == 0 { timestamps[0] } else { 0.5 * (timestamps[k - 1] + timestamps[k]) })
        .collect()
}

/// Ground truth sampled at the frame epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    pub lin_vel: Vector3<f64>,
    pub ang_vel: Vector3<f64>,
    /// Camera-to-world rotation.
    pub rotation: Rotation,
}

pub fn frame_truth(bundle: &SequenceBundle) -> Result<Option<Vec<FrameTruth>>> {
    let Some(gt) = &bundle.groundtruth else {
        return Ok(None);
    };
    let spline = fit_spline(gt)?;
    let times: Vec<f64> = bundle.frames.iter().map(|f| f.timestamp).collect();
    frame_epochs(&times)
        .into_iter()
        .map(|t| {
            if t < spline.start() - 1e-9 || t > spline.end() + 1e-9 {
                return Err(Error::InvalidInput(format!("ground truth does not cover epoch t = {t}")));
            }
            Ok(FrameTruth {
                lin_vel: spline.body_velocity(t),
                ang_vel: spline.angular_velocity(t),
                rotation: spline.rotation(t),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsequenceRun {
    pub index: usize,
    pub start_frame: usize,
    /// First frame of the scored window.
    pub window_start: usize,
    pub state: Option<WindowState>,
    pub report: Option<SolveReport>,
    /// Reason the subsequence was excluded, if it was.
    pub degenerate: Option<String>,
    pub metrics: Option<SubsequenceMetrics>,
}

/// Runs one subsequence. Geometry failures are returned in the run, not
/// as errors.
pub fn run_subsequence(meas: &Measurements, opts: &RunOptions, index: usize, start: usize) -> Result<SubsequenceRun> {
    run_frames(meas, opts, index, start, start + opts.span())
}

/// Solves the window whose newest frame is `frame`, after as much of the
/// configured history as the sequence provides.
pub fn solve_window_ending(meas: &Measurements, opts: &RunOptions, frame: usize) -> Result<SubsequenceRun> {
    if frame == 0 || frame >= meas.timestamps.len() {
        return Err(Error::InvalidInput(format!(
            "frame index {frame} outside 1..{}",
            meas.timestamps.len()
        )));
    }
    run_frames(meas, opts, 0, (frame + 1).saturating_sub(opts.span()), frame + 1)
}

fn run_frames(meas: &Measurements, opts: &RunOptions, index: usize, start: usize, end: usize) -> Result<SubsequenceRun> {
    if end > meas.timestamps.len() {
        return Err(Error::InvalidInput(format!("subsequence {start}..{end} exceeds {} frames", meas.timestamps.len())));
    }
    let mut run = SubsequenceRun {
        index,
        start_frame: start,
        window_start: end.saturating_sub(opts.estimator.window).max(start),
        state: None,
        report: None,
        degenerate: None,
        metrics: None,
    };
    let mut est = Estimator::new(opts.estimator)?;
    let mut last = None;
    for k in start..end {
        est.add_frame(meas.frame_input(k))?;
        if est.len() < 2 {
            continue;
        }
        match est.solve() {
            Ok(r) => last = Some(r),
            Err(Error::DegenerateGeometry(msg)) => {
                if k + 1 == end {
                    run.degenerate = Some(msg);
                    return Ok(run);
                }
                debug!("subsequence {index}: frame {k}: {msg}");
                last = None;
            }
            Err(e) => return Err(e),
        }
    }
    let report = last.expect("final solve succeeded");
    if report.is_degenerate() {
        run.degenerate = Some(format!("{} unobservable directions", report.unobservable.len()));
    } else if let Some((k, n)) = (run.window_start..end - 1)
        .filter(|&k| meas.preint[k].is_none())
        .find_map(|k| meas.visual[k].as_ref().map(|v| (k, v.unobservable.len())).filter(|&(_, n)| n > 0))
    {
        // Without an IMU link the pair alone fixes those slot velocities.
        run.degenerate = Some(format!("frames {k}-{}: {n} unobservable directions", k + 1));
    }
    run.state = Some(est.state().clone());
    run.report = Some(report);
    Ok(run)
}

/// Scores a run against ground truth.
pub fn score(
    run: &SubsequenceRun,
    truth: &[FrameTruth],
    gravity_world: Option<&Vector3<f64>>,
    bias: Option<&ImuBias>,
    use_imu: bool,
) -> Result<Option<SubsequenceMetrics>> {
    let Some(state) = &run.state else {
        return Ok(None);
    };
    let w0 = run.window_start;
    let slots = 1..state.frames.len();
    let ev: Vec<Vector3<f64>> = slots.clone().map(|l| state.frames[l].lin_vel - truth[w0 + l].lin_vel).collect();
    let ew: Vec<Vector3<f64>> = slots.map(|l| state.frames[l].ang_vel - truth[w0 + l].ang_vel).collect();
    let (rmse_bg, rmse_ba) = match (use_imu, bias) {
        (true, Some(b)) => (
            Some((state.bias.gyro - b.gyro).norm()),
            Some((state.bias.accel - b.accel).norm()),
        ),
        _ => (None, None),
    };
    let theta_g = match (use_imu, gravity_world) {
        (true, Some(g)) => Some(gravity_angle(&state.gravity.vector(), &(truth[w0].rotation.inverse() * g))?),
        _ => None,
    };
    Ok(Some(SubsequenceMetrics {
        index: run.index,
        start_frame: run.start_frame,
        rmse_v: rmse(&ev)?,
        rmse_w: rmse(&ew)?,
        rmse_bg,
        rmse_ba,
        theta_g,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub runs: Vec<SubsequenceRun>,
    /// `None` without ground truth or when every run was degenerate.
    pub metrics: Option<MetricsReport>,
}

impl Evaluation {
    pub fn degenerate_count(&self) -> usize {
        self.runs.iter().filter(|r| r.degenerate.is_some()).count()
    }

    pub fn all_degenerate(&self) -> bool {
        !self.runs.is_empty() && self.degenerate_count() == self.runs.len()
    }
}

/// Start frames of every subsequence that fits in `frames`.
pub fn subsequence_starts(frames: usize, opts: &RunOptions) -> Vec<usize> {
    let span = opts.span();
    if frames < span {
        return Vec::new();
    }
    (0..=frames - span).step_by(opts.stride).collect()
}

/// Runs every subsequence of `bundle` using precomputed measurements.
pub fn evaluate_with(bundle: &SequenceBundle, meas: &Measurements, opts: &RunOptions) -> Result<Evaluation> {
    opts.validate()?;
    let starts = subsequence_starts(meas.timestamps.len(), opts);
    if starts.is_empty() {
        return Err(Error::InvalidInput(format!(
            "sequence has {} frames, a subsequence needs {}",
            meas.timestamps.len(),
            opts.span()
        )));
    }
    let truth = frame_truth(bundle)?;
    let use_imu = opts.use_imu && !bundle.imu.is_empty();
    let mut runs = with_pool(opts.workers, || {
        starts
            .par_iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut run = run_subsequence(meas, opts, i, s)?;
                if let (Some(t), None) = (&truth, &run.degenerate) {
                    run.metrics = score(&run, t, bundle.reference.gravity.as_ref(), bundle.reference.bias.as_ref(), use_imu)?;
                }
                Ok(run)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    runs.sort_by_key(|r| r.index);
    let subs: Vec<SubsequenceMetrics> = runs.iter().filter_map(|r| r.metrics).collect();
    let degenerate = runs.iter().filter(|r| r.degenerate.is_some()).count();
    info!("{} subsequences, {} degenerate", runs.len(), degenerate);
    let metrics = if subs.is_empty() { None } else { Some(aggregate(&subs, degenerate)?) };
    Ok(Evaluation { runs, metrics })
}

pub fn evaluate(bundle: &SequenceBundle, opts: &RunOptions) -> Result<Evaluation> {
    opts.validate()?;
    let meas = precompute(bundle, opts)?;
    evaluate_with(bundle, &meas, opts)
}

/// Per-frame state table of a window:
/// `t, vx, vy, vz, wx, wy, wz, gx, gy, gz, bgx, bgy, bgz, bax, bay, baz`.
pub fn state_csv(state: &WindowState) -> String {
    let mut s = String::from("t,vx,vy,vz,wx,wy,wz,gx,gy,gz,bgx,bgy,bgz,bax,bay,baz\n");
    for l in 0..state.frames.len() {
        let f = &state.frames[l];
        let g = state.gravity_in(l);
        let b = &state.bias;
        let vals = [
            f.lin_vel.x, f.lin_vel.y, f.lin_vel.z, f.ang_vel.x, f.ang_vel.y, f.ang_vel.z, g.x, g.y, g.z, b.gyro.x, b.gyro.y,
            b.gyro.z, b.accel.x, b.accel.y, b.accel.z,
        ];
        let _ = write!(s, "{:.9}", f.timestamp);
        for v in vals {
            let _ = write!(s, ",{v:.9e}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Calibration, Reference};
    use crate::sim::{random_trajectory, simulate_sequence, SceneModel, SimConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle(frames: usize, seed: u64) -> SequenceBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SimConfig {
            frames,
            seed,
            ..SimConfig::default()
        };
        let traj = random_trajectory(frames as f64 / cfg.camera_rate + 1.0, &mut rng).unwrap();
        let sim = simulate_sequence(&SceneModel::desk_room(), &traj, &cfg).unwrap();
        SequenceBundle {
            frames: sim.frames,
            imu: sim.imu,
            groundtruth: Some(sim.groundtruth),
            calibration: Calibration {
                intrinsics: cfg.intrinsics,
                depth_scale: 5000.0,
            },
            reference: Reference {
                gravity: Some(sim.gravity),
                bias: Some(sim.bias),
            },
        }
    }

    #[test]
    fn starts_follow_stride() {
        let mut o = RunOptions::new(3);
        assert_eq!(o.span(), 6);
        assert_eq!(subsequence_starts(12, &o), vec![0, 2, 4, 6]);
        o.stride = 5;
        assert_eq!(subsequence_starts(12, &o), vec![0, 5]);
        assert!(subsequence_starts(5, &o).is_empty());
        o.stride = 0;
        assert!(o.validate().is_err());
    }

    #[test]
    fn frame_inputs_line_up() {
        let b = bundle(6, 3);
        let m = precompute(&b, &RunOptions::new(2)).unwrap();
        assert_eq!(m.visual.len(), 5);
        assert_eq!(m.preint.len(), 5);
        assert!(m.gyro.iter().all(Option::is_some));
        let p = m.preint[2].as_ref().unwrap();
        assert!((p.delta_t - (m.epochs[3] - m.epochs[2])).abs() < 1e-12);
        assert!((m.preint[0].as_ref().unwrap().delta_t - 0.5 / 30.0).abs() < 1e-12);
        assert!((m.epochs[2] - 1.5 / 30.0).abs() < 1e-12);
        let f = m.frame_input(3);
        assert_eq!(f.preint.as_ref(), m.preint[2].as_ref());
        assert!(m.frame_input(0).visual.is_none());

        let mut vo = RunOptions::new(2);
        vo.use_imu = false;
        let m = precompute(&b, &vo).unwrap();
        assert!(m.preint.iter().all(Option::is_none) && m.gyro.iter().all(Option::is_none));
    }

    #[test]
    fn evaluation_is_deterministic_and_ordered() {
        let b = bundle(12, 4);
        let mut o = RunOptions::new(3);
        o.workers = Some(3);
        let a = evaluate(&b, &o).unwrap();
        o.workers = Some(1);
        let c = evaluate(&b, &o).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.runs.len(), 4);
        assert!(a.runs.windows(2).all(|w| w[0].index < w[1].index));
        let m = a.metrics.unwrap();
        assert!(m.rmse_v.mean.is_finite() && m.theta_g.is_some() && m.rmse_bg.is_some());
    }

    #[test]
    fn visual_only_has_no_inertial_metrics() {
        let mut b = bundle(8, 5);
        let mut o = RunOptions::new(2);
        o.use_imu = false;
        let a = evaluate(&b, &o).unwrap();
        b.imu.clear();
        let c = evaluate(&b, &o).unwrap();
        assert_eq!(a, c);
        let m = a.metrics.unwrap();
        assert!(m.theta_g.is_none() && m.rmse_bg.is_none());
    }

    #[test]
    fn window_ending_at_frame() {
        let b = bundle(8, 7);
        let o = RunOptions::new(3);
        let m = precompute(&b, &o).unwrap();
        let r = solve_window_ending(&m, &o, 2).unwrap();
        assert_eq!((r.start_frame, r.window_start), (0, 0));
        let st = r.state.unwrap();
        assert_eq!(st.frames.len(), 3);
        assert_eq!(st.frames[2].timestamp, m.timestamps[2]);
        let r = solve_window_ending(&m, &o, 7).unwrap();
        assert_eq!((r.start_frame, r.window_start), (2, 5));
        assert!(solve_window_ending(&m, &o, 0).is_err());
        assert!(solve_window_ending(&m, &o, 8).is_err());
    }

    #[test]
    fn state_table_columns() {
        let b = bundle(6, 6);
        let o = RunOptions::new(2);
        let e = evaluate(&b, &o).unwrap();
        let csv = state_csv(e.runs[0].state.as_ref().unwrap());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 16));
        let g: Vec<f64> = lines[1].split(',').skip(7).take(3).map(|x| x.parse().unwrap()).collect();
        assert!(((g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt() - 981.0).abs() < 1e-6);
    }
}
