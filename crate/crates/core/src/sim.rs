//! Synthetic sequences: spline trajectories, IMU streams and ray-cast depth.

use std::path::Path;

use nalgebra::{Cholesky, Matrix3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{so3_exp, so3_log, so3_right_jacobian, so3_right_jacobian_inv, Pose, Rotation, TimedPose};
use crate::imu::{ImuBias, ImuNoiseParams, ImuSample};
use crate::rangeflow::{DepthFrame, Intrinsics};

/// Interpolating trajectory: natural cubic spline on positions and a C¹
/// piecewise axis-angle spline on orientations.
#[derive(Debug, Clone)]
pub struct TrajectorySpline {
    times: Vec<f64>,
    positions: Vec<Vector3<f64>>,
    /// Second derivatives of the position spline at the knots.
    moments: Vec<Vector3<f64>>,
    rotations: Vec<Rotation>,
    /// Body angular velocity at the knots.
    knot_rates: Vec<Vector3<f64>>,
    /// `log(R_k^T R_{k+1})` per segment.
    increments: Vec<Vector3<f64>>,
}

/// Fits a spline through at least four timestamped poses.
pub fn fit_spline(poses: &[TimedPose]) -> Result<TrajectorySpline> {
    if poses.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "spline needs at least 4 poses, got {}",
            poses.len()
        )));
    }
    for (i, w) in poses.windows(2).enumerate() {
        if !(w[1].timestamp > w[0].timestamp) {
            return Err(Error::NonMonotonic {
                what: "pose",
                index: i + 1,
                prev: w[0].timestamp,
                next: w[1].timestamp,
            });
        }
    }
    let n = poses.len();
    let times: Vec<f64> = poses.iter().map(|p| p.timestamp).collect();
    let positions: Vec<Vector3<f64>> = poses.iter().map(|p| p.pose.translation).collect();
    let rotations: Vec<Rotation> = poses.iter().map(|p| p.pose.rotation).collect();
    let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();

    // Tridiagonal system for the interior moments (Thomas algorithm).
    let mut moments = vec![Vector3::zeros(); n];
    let m = n - 2;
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut rhs = vec![Vector3::zeros(); m];
    for i in 0..m {
        let k = i + 1;
        diag[i] = 2.0 * (h[k - 1] + h[k]);
        upper[i] = h[k];
        rhs[i] = ((positions[k + 1] - positions[k]) / h[k] - (positions[k] - positions[k - 1]) / h[k - 1]) * 6.0;
    }
    for i in 1..m {
        let f = h[i] / diag[i - 1];
        diag[i] -= f * upper[i - 1];
        let prev = rhs[i - 1];
        rhs[i] -= prev * f;
    }
    for i in (0..m).rev() {
        let next = if i + 1 < m { moments[i + 2] } else { Vector3::zeros() };
        moments[i + 1] = (rhs[i] - next * upper[i]) / diag[i];
    }

    let increments: Vec<Vector3<f64>> = rotations
        .windows(2)
        .map(|w| so3_log(&(w[0].inverse() * w[1])))
        .collect();
    let mut knot_rates = vec![Vector3::zeros(); n];
    knot_rates[0] = increments[0] / h[0];
    knot_rates[n - 1] = increments[n - 2] / h[n - 2];
    for k in 1..n - 1 {
        let (a, b) = (h[k - 1], h[k]);
        knot_rates[k] = (increments[k - 1] / a * b + increments[k] / b * a) / (a + b);
    }

    Ok(TrajectorySpline {
        times,
        positions,
        moments,
        rotations,
        knot_rates,
        increments,
    })
}

impl TrajectorySpline {
    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Segment index and clamped time.
    fn segment(&self, t: f64) -> (usize, f64) {
        let t = t.clamp(self.start(), self.end());
        let k = self.times.partition_point(|&x| x <= t).saturating_sub(1);
        (k.min(self.times.len() - 2), t)
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let (k, t) = self.segment(t);
        let h = self.times[k + 1] - self.times[k];
        let (a, b) = (self.times[k + 1] - t, t - self.times[k]);
        let (m0, m1) = (self.moments[k], self.moments[k + 1]);
        let (y0, y1) = (self.positions[k], self.positions[k + 1]);
        m0 * (a * a * a / (6.0 * h))
            + m1 * (b * b * b / (6.0 * h))
            + (y0 / h - m0 * (h / 6.0)) * a
            + (y1 / h - m1 * (h / 6.0)) * b
    }

    /// World-frame linear velocity.
    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        let (k, t) = self.segment(t);
        let h = self.times[k + 1] - self.times[k];
        let (a, b) = (self.times[k + 1] - t, t - self.times[k]);
        let (m0, m1) = (self.moments[k], self.moments[k + 1]);
        let (y0, y1) = (self.positions[k], self.positions[k + 1]);
        -m0 * (a * a / (2.0 * h)) + m1 * (b * b / (2.0 * h)) + (y1 - y0) / h - (m1 - m0) * (h / 6.0)
    }

    /// World-frame linear acceleration.
    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        let (k, t) = self.segment(t);
        let h = self.times[k + 1] - self.times[k];
        (self.moments[k] * (self.times[k + 1] - t) + self.moments[k + 1] * (t - self.times[k])) / h
    }

    /// Axis-angle offset from the segment's start knot and its derivative.
    fn rotation_offset(&self, t: f64) -> (usize, Vector3<f64>, Vector3<f64>) {
        let (k, t) = self.segment(t);
        let h = self.times[k + 1] - self.times[k];
        let tau = (t - self.times[k]) / h;
        let theta = self.increments[k];
        let m0 = self.knot_rates[k];
        let m1 = so3_right_jacobian_inv(&theta) * self.knot_rates[k + 1];
        let (t2, t3) = (tau * tau, tau * tau * tau);
        let phi = m0 * (h * (t3 - 2.0 * t2 + tau)) + theta * (-2.0 * t3 + 3.0 * t2) + m1 * (h * (t3 - t2));
        let dphi = m0 * (3.0 * t2 - 4.0 * tau + 1.0) + theta * ((-6.0 * t2 + 6.0 * tau) / h) + m1 * (3.0 * t2 - 2.0 * tau);
        (k, phi, dphi)
    }

    pub fn rotation(&self, t: f64) -> Rotation {
        let (k, phi, _) = self.rotation_offset(t);
        self.rotations[k] * so3_exp(&phi)
    }

    /// Body-frame angular velocity.
    pub fn angular_velocity(&self, t: f64) -> Vector3<f64> {
        let (_, phi, dphi) = self.rotation_offset(t);
        so3_right_jacobian(&phi) * dphi
    }

    /// Body-frame linear velocity `Rᵀ v`.
    pub fn body_velocity(&self, t: f64) -> Vector3<f64> {
        self.rotation(t).inverse() * self.velocity(t)
    }

    pub fn pose(&self, t: f64) -> Pose {
        Pose::new(self.rotation(t), self.position(t))
    }
}

/// IMU stream at `rate` Hz over the spline's span:
/// `ω̃ = ω + b_g + η_g`, `ã = Rᵀ(a − g) + b_a + η_a`.
///
/// Like an integrating IMU, each sample reports the motion over the
/// interval up to the next one: the rotation increment divided by the
/// period, and the mean specific force expressed in the body frame at the
/// interval start. The last sample carries the instantaneous values.
pub fn synthesize_imu(
    traj: &TrajectorySpline,
    rate: f64,
    noise: &ImuNoiseParams,
    bias: &ImuBias,
    gravity: &Vector3<f64>,
    rng: &mut impl Rng,
) -> Result<Vec<ImuSample>> {
    if !(rate > 0.0) {
        return Err(Error::InvalidInput(format!("IMU rate must be positive, got {rate}")));
    }
    let lg = noise_factor(&noise.gyro_cov)?;
    let la = noise_factor(&noise.accel_cov)?;
    let count = ((traj.end() - traj.start()) * rate + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t = traj.start() + i as f64 / rate;
        let (omega, force) = if i + 1 < count {
            interval_mean(traj, t, 1.0 / rate, gravity)
        } else {
            (traj.angular_velocity(t), traj.rotation(t).inverse() * (traj.acceleration(t) - gravity))
        };
        let ng: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let na: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let gyro = omega + bias.gyro + lg * ng;
        let accel = force + bias.accel + la * na;
        out.push(ImuSample::new(t, gyro, accel));
    }
    Ok(out)
}

/// Mean rotation rate and body-frame specific force over `[t, t + h]`
/// (five-point Gauss-Legendre on the force).
fn interval_mean(traj: &TrajectorySpline, t: f64, h: f64, gravity: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    const NODES: [(f64, f64); 5] = [
        (0.0, 0.568_888_888_888_888_9),
        (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
        (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
        (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
        (0.906_179_845_938_664, 0.236_926_885_056_189_1),
    ];
    let r0_t = traj.rotation(t).inverse();
    let omega = so3_log(&(r0_t * traj.rotation(t + h))) / h;
    let mut force = Vector3::zeros();
    for (x, w) in NODES {
        let tq = t + 0.5 * h * (x + 1.0);
        force += (traj.acceleration(tq) - gravity) * (0.5 * w);
    }
    (omega, r0_t * force)
}

fn noise_factor(cov: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if cov.iter().all(|&x| x == 0.0) {
        return Ok(Matrix3::zeros());
    }
    Cholesky::new(*cov)
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidInput("IMU noise covariance is not positive definite".into()))
}

/// A scene primitive, in world coordinates (cm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Points with `normal · x = offset`.
    Plane { normal: Unit<Vector3<f64>>, offset: f64 },
    /// Axis-aligned box given by its center and half-extents.
    Box { center: Vector3<f64>, half_extents: Vector3<f64> },
}

impl Primitive {
    /// Ray parameter of the nearest hit with `λ > 0`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Primitive::Plane { normal, offset } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let lambda = (offset - normal.dot(origin)) / denom;
                (lambda > 0.0).then_some(lambda)
            }
            Primitive::Box { center, half_extents } => {
                let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    let lo = center[i] - half_extents[i] - origin[i];
                    let hi = center[i] + half_extents[i] - origin[i];
                    if dir[i].abs() < 1e-15 {
                        if lo > 0.0 || hi < 0.0 {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = (lo / dir[i], hi / dir[i]);
                    near = near.max(a.min(b));
                    far = far.min(a.max(b));
                }
                if near > far || far <= 0.0 {
                    None
                } else if near > 0.0 {
                    Some(near)
                } else {
                    Some(far)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    primitives: Vec<Primitive>,
}

impl SceneModel {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::Empty("scene"));
        }
        for p in &primitives {
            match p {
                Primitive::Plane { offset, normal } => {
                    if !offset.is_finite() || normal.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite("scene plane"));
                    }
                }
                Primitive::Box { center, half_extents } => {
                    if half_extents.iter().any(|&e| !(e > 0.0)) || center.iter().any(|x| !x.is_finite()) {
                        return Err(Error::InvalidInput(format!("box extents must be positive: {half_extents:?}")));
                    }
                }
            }
        }
        Ok(Self { primitives })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    /// A single plane `z = depth` facing the origin.
    pub fn frontal_plane(depth: f64) -> Self {
        Self {
            primitives: vec![Primitive::Plane {
                normal: Vector3::z_axis(),
                offset: depth,
            }],
        }
    }

    /// Closed room (y points down, floor at y = 100) with a few boxes
    /// in front of the origin.
    pub fn desk_room() -> Self {
        let plane = |n: Vector3<f64>, d: f64| Primitive::Plane {
            normal: Unit::new_unchecked(n),
            offset: d,
        };
        let cube = |c: [f64; 3], e: [f64; 3]| Primitive::Box {
            center: Vector3::from(c),
            half_extents: Vector3::from(e),
        };
        Self {
            primitives: vec![
                plane(Vector3::y(), 100.0),
                plane(Vector3::y(), -150.0),
                plane(Vector3::x(), -250.0),
                plane(Vector3::x(), 250.0),
                plane(Vector3::z(), 350.0),
                plane(Vector3::z(), -200.0),
                cube([-60.0, 65.0, 200.0], [40.0, 35.0, 30.0]),
                cube([70.0, 50.0, 240.0], [35.0, 50.0, 35.0]),
                cube([0.0, 85.0, 150.0], [25.0, 15.0, 20.0]),
                cube([150.0, 20.0, 300.0], [40.0, 80.0, 30.0]),
                cube([-170.0, 40.0, 280.0], [30.0, 60.0, 50.0]),
                cube([10.0, -40.0, 330.0], [60.0, 20.0, 20.0]),
            ],
        }
    }

    /// Parses `plane nx ny nz d` and `box cx cy cz ex ey ez` lines, where
    /// `e*` are half-extents. `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut prims = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let kind = tokens.next().unwrap_or("");
            let values: Vec<f64> = tokens
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
            if values.len() != if kind == "plane" { 4 } else { 6 } {
                return Err(Error::parse(path, lineno + 1, format!("wrong field count for `{kind}`")));
            }
            match kind {
                "plane" => {
                    let n = Vector3::new(values[0], values[1], values[2]);
                    let norm = n.norm();
                    if !(norm > 0.0) {
                        return Err(Error::parse(path, lineno + 1, "plane normal is zero"));
                    }
                    prims.push(Primitive::Plane {
                        normal: Unit::new_unchecked(n / norm),
                        offset: values[3] / norm,
                    });
                }
                "box" => prims.push(Primitive::Box {
                    center: Vector3::new(values[0], values[1], values[2]),
                    half_extents: Vector3::new(values[3], values[4], values[5]),
                }),
                other => {
                    return Err(Error::parse(path, lineno + 1, format!("unknown primitive `{other}`")));
                }
            }
        }
        Self::new(prims).map_err(|e| match e {
            Error::Empty(_) => Error::parse(path, 0, "scene has no primitives"),
            other => other,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.primitives {
            match p {
                Primitive::Plane { normal, offset } => {
                    s += &format!("plane {} {} {} {}\n", normal.x, normal.y, normal.z, offset);
                }
                Primitive::Box { center, half_extents: e } => {
                    s += &format!("box {} {} {} {} {} {}\n", center.x, center.y, center.z, e.x, e.y, e.z);
                }
            }
        }
        s
    }

    /// Nearest ray parameter over all primitives.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .min_by(f64::total_cmp)
    }
}

/// Z-depth image seen from `pose` (camera to world); 0 where no primitive
/// is hit.
pub fn render_depth(scene: &SceneModel, pose: &Pose, k: &Intrinsics, timestamp: f64) -> Result<DepthFrame> {
    k.validate()?;
    let mut depth = Vec::with_capacity(k.width * k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            // Unit z component, so the ray parameter is the z-depth.
            let ray = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let dir = pose.rotation * ray;
            depth.push(scene.cast(&pose.translation, &dir).unwrap_or(0.0));
        }
    }
    DepthFrame::new(timestamp, *k, depth)
}

/// Settings for [`simulate_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub frames: usize,
    pub camera_rate: f64,
    pub imu_rate: f64,
    pub noise: ImuNoiseParams,
    pub bias: ImuBias,
    /// World gravity vector (cm/s²); the world y axis points down.
    pub gravity: Vector3<f64>,
    pub intrinsics: Intrinsics,
    /// Standard deviation of additive depth noise (cm).
    pub depth_noise: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            frames: 30,
            camera_rate: 30.0,
            imu_rate: 200.0,
            noise: ImuNoiseParams::default(),
            bias: ImuBias::new(Vector3::new(0.004, -0.003, 0.002), Vector3::new(3.0, -2.0, 4.0)),
            gravity: Vector3::new(0.0, crate::geom::GRAVITY_MAGNITUDE, 0.0),
            intrinsics: Intrinsics {
                fx: 131.25,
                fy: 131.25,
                cx: 79.5,
                cy: 59.5,
                width: 160,
                height: 120,
            },
            depth_noise: 0.0,
            seed: 0,
        }
    }
}

/// Everything a simulated run produces.
#[derive(Debug, Clone)]
pub struct SimulatedSequence {
    pub frames: Vec<DepthFrame>,
    pub imu: Vec<ImuSample>,
    /// Poses at the IMU and frame times.
    pub groundtruth: Vec<TimedPose>,
    pub trajectory: TrajectorySpline,
    pub bias: ImuBias,
    pub gravity: Vector3<f64>,
}

/// Smooth random hand-held motion in front of [`SceneModel::desk_room`]:
/// knots every 0.4 s with bounded random-walk position and yaw/pitch/roll.
pub fn random_trajectory(duration: f64, rng: &mut impl Rng) -> Result<TrajectorySpline> {
    let knot_dt = 0.4;
    let knots = ((duration / knot_dt).ceil() as usize + 1).max(4);
    let mut pos = Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..10.0), rng.random_range(-20.0..20.0));
    let mut yaw: f64 = rng.random_range(-0.2..0.2);
    let mut pitch: f64 = -0.3 + rng.random_range(-0.1..0.1);
    let mut roll: f64 = rng.random_range(-0.05..0.05);
    let mut poses = Vec::with_capacity(knots);
    for k in 0..knots {
        let r = so3_exp(&Vector3::new(0.0, yaw, 0.0))
            * so3_exp(&Vector3::new(pitch, 0.0, 0.0))
            * so3_exp(&Vector3::new(0.0, 0.0, roll));
        poses.push(TimedPose {
            timestamp: k as f64 * knot_dt,
            pose: Pose::new(r, pos),
        });
        let step = Vector3::from_fn(|_, _| rng.random_range(-15.0..15.0));
        pos = (pos + step).map(|x| x.clamp(-40.0, 40.0));
        yaw = (yaw + rng.random_range(-0.15..0.15)).clamp(-0.45, 0.45);
        pitch = (pitch + rng.random_range(-0.12..0.12)).clamp(-0.55, -0.05);
        roll = (roll + rng.random_range(-0.08..0.08)).clamp(-0.2, 0.2);
    }
    fit_spline(&poses)
}

/// Circle of `radius` in the horizontal plane around `center`, with the
/// camera yawing to face the center and tilted by `pitch` about its x axis
/// (negative looks down).
pub fn orbit_trajectory(
    center: &Vector3<f64>,
    radius: f64,
    rate: f64,
    pitch: f64,
    duration: f64,
) -> Result<TrajectorySpline> {
    let tilt = so3_exp(&Vector3::new(pitch, 0.0, 0.0));
    let knots = ((duration / 0.05).ceil() as usize + 1).max(4);
    let poses: Vec<TimedPose> = (0..knots)
        .map(|k| {
            let t = k as f64 * duration / (knots - 1) as f64;
            let a = rate * t;
            let position = center + Vector3::new(-radius * a.sin(), 0.0, -radius * a.cos());
            // Yaw about the (downward) y axis keeps the optical axis on the center.
            let rotation = so3_exp(&Vector3::new(0.0, -a, 0.0)) * tilt;
            TimedPose {
                timestamp: t,
                pose: Pose::new(rotation, position),
            }
        })
        .collect();
    fit_spline(&poses)
}

/// Renders depth at the camera rate along `traj` and synthesizes the IMU
/// stream. All randomness comes from `cfg.seed`.
pub fn simulate_sequence(scene: &SceneModel, traj: &TrajectorySpline, cfg: &SimConfig) -> Result<SimulatedSequence> {
    if cfg.frames == 0 || !(cfg.camera_rate > 0.0) {
        return Err(Error::InvalidInput("need at least one frame and a positive camera rate".into()));
    }
    let span = (cfg.frames - 1) as f64 / cfg.camera_rate;
    if traj.start() + span > traj.end() + 1e-9 {
        return Err(Error::InvalidInput(format!(
            "trajectory lasts {:.3} s, {} frames need {:.3} s",
            traj.end() - traj.start(),
            cfg.frames,
            span
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let imu = synthesize_imu(traj, cfg.imu_rate, &cfg.noise, &cfg.bias, &cfg.gravity, &mut rng)?
        .into_iter()
        .take_while(|s| s.timestamp < traj.start() + span + 1.0 / cfg.imu_rate - 1e-9)
        .collect::<Vec<_>>();
    let frames = (0..cfg.frames)
        .into_par_iter()
        .map(|i| {
            let t = traj.start() + i as f64 / cfg.camera_rate;
            let mut frame = render_depth(scene, &traj.pose(t), &cfg.intrinsics, t)?;
            if cfg.depth_noise > 0.0 {
                let mut frng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
                let noisy: Vec<f64> = frame
                    .depth()
                    .iter()
                    .map(|&z| {
                        if z > 0.0 {
                            let n: f64 = StandardNormal.sample(&mut frng);
                            (z + cfg.depth_noise * n).max(0.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                frame = DepthFrame::new(t, cfg.intrinsics, noisy)?;
            }
            Ok(frame)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gt_times: Vec<f64> = imu.iter().map(|s| s.timestamp).chain(frames.iter().map(|f| f.timestamp)).collect();
    gt_times.sort_by(f64::total_cmp);
    gt_times.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let groundtruth = gt_times
        .into_iter()
        .map(|t| TimedPose {
            timestamp: t,
            pose: traj.pose(t),
        })
        .collect();
    Ok(SimulatedSequence {
        frames,
        imu,
        groundtruth,
        trajectory: traj.clone(),
        bias: cfg.bias,
        gravity: cfg.gravity,
    })
}
