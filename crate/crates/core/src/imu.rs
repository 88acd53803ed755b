//! IMU measurement model and on-manifold preintegration.
//!
//! Measurements are `ω̃ = ω + b_g + η_g` and `ã = Rᵀ(a − g) + b_a + η_a`
//! in the body (camera) frame. Preintegration accumulates the relative
//! rotation, velocity and position increments between two frames with
//! a zero-order hold on every sample, propagates their 9x9 covariance
//! (ordered δφ, δv, δp) and keeps first-order bias Jacobians so the
//! deltas can be corrected when the bias estimate moves.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x2, Matrix6, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::geom::{skew, so3_exp, so3_log, so3_right_jacobian, GravityDir, Rotation};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    /// Seconds.
    pub timestamp: f64,
    /// rad/s.
    pub gyro: Vector3<f64>,
    /// cm/s².
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(timestamp: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self {
            timestamp,
            gyro,
            accel,
        }
    }

    fn is_finite(&self) -> bool {
        self.timestamp.is_finite()
            && self.gyro.iter().all(|v| v.is_finite())
            && self.accel.iter().all(|v| v.is_finite())
    }
}

/// Discrete per-sample noise covariances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoiseParams {
    /// rad²/s²
    pub gyro_cov: Matrix3<f64>,
    /// cm²/s⁴
    pub accel_cov: Matrix3<f64>,
}

impl ImuNoiseParams {
    pub fn isotropic(sigma_gyro: f64, sigma_accel: f64) -> Self {
        Self {
            gyro_cov: Matrix3::identity() * sigma_gyro * sigma_gyro,
            accel_cov: Matrix3::identity() * sigma_accel * sigma_accel,
        }
    }

    /// Converts continuous-time noise densities (rad/s/√Hz, cm/s²/√Hz)
    /// to per-sample standard deviations at `rate_hz`.
    pub fn from_densities(gyro_density: f64, accel_density: f64, rate_hz: f64) -> Self {
        let root = rate_hz.sqrt();
        Self::isotropic(gyro_density * root, accel_density * root)
    }

    /// Block-diagonal `Σ_η = diag(Σ_ω, Σ_a)`.
    pub fn eta_cov(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.gyro_cov);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.accel_cov);
        m
    }
}

impl Default for ImuNoiseParams {
    /// 1.7e-4 rad/s/√Hz and 2.0 cm/s²/√Hz at 200 Hz.
    fn default() -> Self {
        Self::from_densities(1.7e-4, 2.0, 200.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuBias {
    /// rad/s
    pub gyro: Vector3<f64>,
    /// cm/s²
    pub accel: Vector3<f64>,
}

impl ImuBias {
    pub fn new(gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { gyro, accel }
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

/// First-order sensitivities of the preintegrated deltas to the biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasJacobians {
    pub dr_dbg: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    pub dp_dba: Matrix3<f64>,
}

impl BiasJacobians {
    fn zero() -> Self {
        Self {
            dr_dbg: Matrix3::zeros(),
            dv_dbg: Matrix3::zeros(),
            dv_dba: Matrix3::zeros(),
            dp_dbg: Matrix3::zeros(),
            dp_dba: Matrix3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedImu {
    pub delta_r: Rotation,
    /// cm/s
    pub delta_v: Vector3<f64>,
    /// cm
    pub delta_p: Vector3<f64>,
    /// s
    pub delta_t: f64,
    /// Ordered (δφ, δv, δp).
    pub cov: Matrix9,
    pub bias_lin: ImuBias,
    pub jacobians: BiasJacobians,
}

impl PreintegratedImu {
    pub fn identity(bias_lin: ImuBias) -> Self {
        Self {
            delta_r: Rotation::identity(),
            delta_v: Vector3::zeros(),
            delta_p: Vector3::zeros(),
            delta_t: 0.0,
            cov: Matrix9::zeros(),
            bias_lin,
            jacobians: BiasJacobians::zero(),
        }
    }

    /// Advances by one zero-order-hold interval of length `dt`.
    pub fn integrate(
        &mut self,
        gyro: &Vector3<f64>,
        accel: &Vector3<f64>,
        dt: f64,
        noise: &ImuNoiseParams,
    ) {
        let omega = gyro - self.bias_lin.gyro;
        let acc = accel - self.bias_lin.accel;
        let step = so3_exp(&(omega * dt));
        let (a, b) = transition_matrices(&step, &self.delta_r, &acc, dt);
        self.cov = a * self.cov * a.transpose() + b * noise.eta_cov() * b.transpose();
        self.cov = (self.cov + self.cov.transpose()) * 0.5;

        let r = *self.delta_r.matrix();
        let dt2 = dt * dt;
        let acc_skew = skew(&acc);
        let j = &mut self.jacobians;
        j.dp_dba += j.dv_dba * dt - r * (0.5 * dt2);
        j.dp_dbg += j.dv_dbg * dt - r * acc_skew * j.dr_dbg * (0.5 * dt2);
        j.dv_dba -= r * dt;
        j.dv_dbg -= r * acc_skew * j.dr_dbg * dt;
        j.dr_dbg = step.matrix().transpose() * j.dr_dbg - so3_right_jacobian(&(omega * dt)) * dt;

        self.delta_p += self.delta_v * dt + r * acc * (0.5 * dt2);
        self.delta_v += r * acc * dt;
        self.delta_r = Rotation::from_matrix_unchecked(r * step.matrix());
        self.delta_r.renormalize();
        self.delta_t += dt;
    }

    fn bias_offset(&self, bias: &ImuBias) -> (Vector3<f64>, Vector3<f64>) {
        (
            bias.gyro - self.bias_lin.gyro,
            bias.accel - self.bias_lin.accel,
        )
    }

    /// `ΔR̃(b) = ΔR̃ · exp(∂ΔR/∂b_g · δb_g)`.
    pub fn corrected_delta_r(&self, bias: &ImuBias) -> Rotation {
        let (dbg, _) = self.bias_offset(bias);
        self.delta_r * so3_exp(&(self.jacobians.dr_dbg * dbg))
    }

    pub fn corrected_delta_v(&self, bias: &ImuBias) -> Vector3<f64> {
        let (dbg, dba) = self.bias_offset(bias);
        self.delta_v + self.jacobians.dv_dbg * dbg + self.jacobians.dv_dba * dba
    }

    pub fn corrected_delta_p(&self, bias: &ImuBias) -> Vector3<f64> {
        let (dbg, dba) = self.bias_offset(bias);
        self.delta_p + self.jacobians.dp_dbg * dbg + self.jacobians.dp_dba * dba
    }

    /// Center block `Σ_Δv` of the covariance.
    pub fn cov_delta_v(&self) -> Matrix3<f64> {
        self.cov.fixed_view::<3, 3>(3, 3).into_owned()
    }

    /// Chains `self` over `[t_i, t_k]` with `next` over `[t_k, t_j]`.
    /// Both must share the bias linearization point.
    pub fn compose(&self, next: &PreintegratedImu) -> PreintegratedImu {
        let r1 = *self.delta_r.matrix();
        let r2 = *next.delta_r.matrix();
        let dt2 = next.delta_t;

        // Error-state map from (first, second) to the composed increment.
        let mut a = Matrix9::zeros();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&r2.transpose());
        a.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-r1 * skew(&next.delta_v)));
        a.fixed_view_mut::<3, 3>(3, 3).copy_from(&Matrix3::identity());
        a.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-r1 * skew(&next.delta_p)));
        a.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt2));
        a.fixed_view_mut::<3, 3>(6, 6).copy_from(&Matrix3::identity());
        let mut b = Matrix9::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&r1);
        b.fixed_view_mut::<3, 3>(6, 6).copy_from(&r1);
        let cov = a * self.cov * a.transpose() + b * next.cov * b.transpose();

        let j1 = &self.jacobians;
        let j2 = &next.jacobians;
        let jacobians = BiasJacobians {
            dr_dbg: r2.transpose() * j1.dr_dbg + j2.dr_dbg,
            dv_dbg: j1.dv_dbg - r1 * skew(&next.delta_v) * j1.dr_dbg + r1 * j2.dv_dbg,
            dv_dba: j1.dv_dba + r1 * j2.dv_dba,
            dp_dbg: j1.dp_dbg + j1.dv_dbg * dt2 - r1 * skew(&next.delta_p) * j1.dr_dbg
                + r1 * j2.dp_dbg,
            dp_dba: j1.dp_dba + j1.dv_dba * dt2 + r1 * j2.dp_dba,
        };

        PreintegratedImu {
            delta_r: self.delta_r * next.delta_r,
            delta_v: self.delta_v + r1 * next.delta_v,
            delta_p: self.delta_p + self.delta_v * dt2 + r1 * next.delta_p,
            delta_t: self.delta_t + dt2,
            cov: (cov + cov.transpose()) * 0.5,
            bias_lin: self.bias_lin,
            jacobians,
        }
    }
}

fn check_stream(samples: &[ImuSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFinite("IMU sample"));
        }
        if i > 0 && s.timestamp <= samples[i - 1].timestamp {
            return Err(Error::NonMonotonic {
                what: "IMU sample",
                index: i,
                prev: samples[i - 1].timestamp,
                next: s.timestamp,
            });
        }
    }
    Ok(())
}

/// Preintegrates a sample stream. Each sample is held until the next
/// one; the last sample only marks the end of the interval.
pub fn preintegrate(
    samples: &[ImuSample],
    bias: &ImuBias,
    noise: &ImuNoiseParams,
) -> Result<PreintegratedImu> {
    check_stream(samples)?;
    let mut out = PreintegratedImu::identity(*bias);
    for pair in samples.windows(2) {
        let dt = pair[1].timestamp - pair[0].timestamp;
        out.integrate(&pair[0].gyro, &pair[0].accel, dt, noise);
    }
    Ok(out)
}

/// Per-step covariance transition `A` (9x9) and noise input `B` (9x6).
///
/// `delta_r_step` is the rotation over this step, `delta_r_accum` the
/// preintegrated rotation up to its start and `accel_corrected` the
/// bias-free accelerometer reading.
pub fn transition_matrices(
    delta_r_step: &Rotation,
    delta_r_accum: &Rotation,
    accel_corrected: &Vector3<f64>,
    dt: f64,
) -> (Matrix9, Matrix9x6) {
    let r = delta_r_accum.matrix();
    let acc_skew = skew(accel_corrected);
    let i3 = Matrix3::identity();

    let mut a = Matrix9::zeros();
    a.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&delta_r_step.matrix().transpose());
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r * acc_skew * dt));
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&i3);
    a.fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&(-r * acc_skew * (0.5 * dt * dt)));
    a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(i3 * dt));
    a.fixed_view_mut::<3, 3>(6, 6).copy_from(&i3);

    let jr = so3_right_jacobian(&so3_log(delta_r_step));
    let mut b = Matrix9x6::zeros();
    b.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
    b.fixed_view_mut::<3, 3>(3, 3).copy_from(&(r * dt));
    b.fixed_view_mut::<3, 3>(6, 3).copy_from(&(r * (0.5 * dt * dt)));
    (a, b)
}

/// Initial gyro bias: measured minus estimated angular velocity.
pub fn seed_gyro_bias(omega_est: &Vector3<f64>, omega_meas: &Vector3<f64>) -> Vector3<f64> {
    omega_meas - omega_est
}

/// First gravity estimate from two velocities (world frame) and the
/// preintegrated velocity increment between them:
/// `ĝ = (v_j − v_i)/Δt − R_i Δṽ/Δt`.
pub fn seed_gravity(
    v_i: &Vector3<f64>,
    v_j: &Vector3<f64>,
    r_i: &Rotation,
    preint: &PreintegratedImu,
) -> Result<Vector3<f64>> {
    if preint.delta_t <= 0.0 {
        return Err(Error::ZeroDuration);
    }
    let dt = preint.delta_t;
    Ok((v_j - v_i) / dt - r_i * preint.delta_v / dt)
}

/// Preintegrated velocity residual
/// `R_iᵀ(v_j − v_i − g Δt) − Δṽ(b)` with world-frame velocities.
pub fn residual_delta_v(
    v_i: &Vector3<f64>,
    v_j: &Vector3<f64>,
    r_i: &Rotation,
    g: &GravityDir,
    preint: &PreintegratedImu,
    bias: &ImuBias,
) -> Vector3<f64> {
    r_i.inverse() * (v_j - v_i - g.vector() * preint.delta_t) - preint.corrected_delta_v(bias)
}

/// Analytic Jacobians of [`residual_delta_v`].
#[derive(Debug, Clone, Copy)]
pub struct DeltaVJacobians {
    pub d_vi: Matrix3<f64>,
    pub d_vj: Matrix3<f64>,
    /// Against the tangent increment of gravity.
    pub d_gravity: Matrix3x2<f64>,
    pub d_bg: Matrix3<f64>,
    pub d_ba: Matrix3<f64>,
}

pub fn residual_delta_v_jacobians(
    r_i: &Rotation,
    g: &GravityDir,
    preint: &PreintegratedImu,
) -> DeltaVJacobians {
    let rt = r_i.matrix().transpose();
    DeltaVJacobians {
        d_vi: -rt,
        d_vj: rt,
        d_gravity: -rt * g.vector_jacobian() * preint.delta_t,
        d_bg: -preint.jacobians.dv_dbg,
        d_ba: -preint.jacobians.dv_dba,
    }
}

/// Linear interpolation of the stream at `t`. `None` outside its span.
pub fn interpolate_at(samples: &[ImuSample], t: f64) -> Option<ImuSample> {
    let first = samples.first()?;
    let last = samples.last()?;
    if t < first.timestamp || t > last.timestamp {
        return None;
    }
    let k = samples.partition_point(|s| s.timestamp <= t);
    if k == 0 {
        return Some(*first);
    }
    let a = &samples[k - 1];
    if a.timestamp == t || k == samples.len() {
        return Some(ImuSample { timestamp: t, ..*a });
    }
    let b = &samples[k];
    let w = (t - a.timestamp) / (b.timestamp - a.timestamp);
    Some(ImuSample {
        timestamp: t,
        gyro: a.gyro.lerp(&b.gyro, w),
        accel: a.accel.lerp(&b.accel, w),
    })
}

/// The sub-stream covering `[t0, t1]`: a sample interpolated at `t0`,
/// every sample strictly inside, and one interpolated at `t1`.
pub fn bucket_samples(samples: &[ImuSample], t0: f64, t1: f64) -> Result<Vec<ImuSample>> {
    if t1 <= t0 {
        return Err(Error::NonPositiveDt(t1 - t0));
    }
    let start = interpolate_at(samples, t0).ok_or_else(|| {
        Error::InvalidInput(format!("IMU stream does not cover t = {t0}"))
    })?;
    let end = interpolate_at(samples, t1).ok_or_else(|| {
        Error::InvalidInput(format!("IMU stream does not cover t = {t1}"))
    })?;
    let lo = samples.partition_point(|s| s.timestamp <= t0);
    let hi = samples.partition_point(|s| s.timestamp < t1);
    let mut out = Vec::with_capacity(hi.saturating_sub(lo) + 2);
    out.push(start);
    out.extend_from_slice(&samples[lo..hi]);
    out.push(end);
    Ok(out)
}

/// Parses the IMU CSV format `t, wx, wy, wz, ax, ay, az` (s, rad/s,
/// cm/s²). A non-numeric first line is taken as a header; `#` starts a
/// comment. Timestamps must be strictly increasing.
pub fn parse_imu_csv(text: &str, path: &Path) -> Result<Vec<ImuSample>> {
    let mut out: Vec<ImuSample> = Vec::new();
    let mut seen_data = false;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let values: std::result::Result<Vec<f64>, _> =
            fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if !seen_data => {
                seen_data = true;
                continue;
            }
            Err(e) => return Err(Error::parse(path, n + 1, e.to_string())),
        };
        seen_data = true;
        if values.len() != 7 {
            return Err(Error::parse(
                path,
                n + 1,
                format!("expected 7 fields, found {}", values.len()),
            ));
        }
        let s = ImuSample::new(
            values[0],
            Vector3::new(values[1], values[2], values[3]),
            Vector3::new(values[4], values[5], values[6]),
        );
        if let Some(prev) = out.last() {
            if s.timestamp <= prev.timestamp {
                return Err(Error::parse(
                    path,
                    n + 1,
                    format!(
                        "timestamp {} not after previous {}",
                        s.timestamp, prev.timestamp
                    ),
                ));
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_imu_csv(&text, path)
}

pub fn format_imu_csv(samples: &[ImuSample]) -> String {
    let mut out = String::from("# t, wx, wy, wz, ax, ay, az\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{:.9}, {:.8e}, {:.8e}, {:.8e}, {:.8e}, {:.8e}, {:.8e}",
            s.timestamp, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_stream(rng: &mut ChaCha8Rng, n: usize, dt: f64) -> Vec<ImuSample> {
        (0..n)
            .map(|k| {
                let g = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
                let a = Vector3::from_fn(|_, _| rng.random_range(-200.0..200.0))
                    + Vector3::new(0.0, 0.0, 981.0);
                ImuSample::new(k as f64 * dt, g, a)
            })
            .collect()
    }

    #[test]
    fn empty_stream_is_identity() {
        let p = preintegrate(&[], &ImuBias::zero(), &ImuNoiseParams::default()).unwrap();
        assert_eq!(p.delta_r, Rotation::identity());
        assert_eq!(p.delta_v, Vector3::zeros());
        assert_eq!(p.delta_p, Vector3::zeros());
        assert_eq!(p.delta_t, 0.0);
        assert_eq!(p.cov, Matrix9::zeros());
    }

    #[test]
    fn constant_acceleration_no_rotation() {
        let samples: Vec<_> = (0..10)
            .map(|k| {
                ImuSample::new(
                    0.1 * k as f64 / 9.0,
                    Vector3::zeros(),
                    Vector3::new(0.0, 0.0, 100.0),
                )
            })
            .collect();
        let p = preintegrate(&samples, &ImuBias::zero(), &ImuNoiseParams::default()).unwrap();
        assert!((p.delta_t - 0.1).abs() < 1e-15);
        assert!((p.delta_v - Vector3::new(0.0, 0.0, 10.0)).norm() < 1e-12);
        assert!((p.delta_r.matrix() - Matrix3::identity()).norm() < 1e-15);
        // ½ a t²
        assert!((p.delta_p.z - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_streams() {
        let n = ImuNoiseParams::default();
        let b = ImuBias::zero();
        let s = |t: f64| ImuSample::new(t, Vector3::zeros(), Vector3::zeros());
        assert!(matches!(
            preintegrate(&[s(0.0), s(0.02), s(0.01)], &b, &n),
            Err(Error::NonMonotonic { index: 2, .. })
        ));
        assert!(matches!(
            preintegrate(&[s(0.0), s(0.0)], &b, &n),
            Err(Error::NonMonotonic { .. })
        ));
        let mut bad = s(0.01);
        bad.accel.y = f64::NAN;
        assert!(matches!(
            preintegrate(&[s(0.0), bad], &b, &n),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn transition_matrices_zero_accel() {
        let id = Rotation::identity();
        let dt = 0.01;
        let (a, b) = transition_matrices(&id, &id, &Vector3::zeros(), dt);
        let mut expected = Matrix9::identity();
        expected
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt));
        assert!((a - expected).norm() < 1e-15);
        let lower_right = b.fixed_view::<3, 3>(6, 3);
        assert!((lower_right - Matrix3::identity() * 0.5e-4).norm() < 1e-18);
        assert!((b.fixed_view::<3, 3>(0, 0) - Matrix3::identity() * dt).norm() < 1e-15);
    }

    #[test]
    fn transition_matrices_generic_blocks() {
        let step = so3_exp(&Vector3::new(0.01, -0.02, 0.005));
        let accum = so3_exp(&Vector3::new(0.3, 0.1, -0.4));
        let acc = Vector3::new(12.0, -3.0, 975.0);
        let dt = 0.005;
        let (a, b) = transition_matrices(&step, &accum, &acc, dt);
        // Element-wise transcription: -ΔR (a^) Δt, with (a^)ᵢⱼ = -ε_ijk a_k.
        let r = accum.matrix();
        let hat = Matrix3::new(
            0.0, -acc[2], acc[1], //
            acc[2], 0.0, -acc[0], //
            -acc[1], acc[0], 0.0,
        );
        let mut direct = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += r[(i, k)] * hat[(k, j)];
                }
                direct[(i, j)] = -s * dt;
            }
        }
        assert!((a.fixed_view::<3, 3>(3, 0) - direct).norm() < 1e-12);
        assert!((a.fixed_view::<3, 3>(6, 0) - direct * (0.5 * dt)).norm() < 1e-12);
        assert!((a.fixed_view::<3, 3>(0, 0) - step.matrix().transpose()).norm() < 1e-15);
        assert!((b.fixed_view::<3, 3>(3, 3) - r * dt).norm() < 1e-15);
    }

    #[test]
    fn covariance_stays_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = random_stream(&mut rng, 200, 0.005);
        let noise = ImuNoiseParams::default();
        let mut p = PreintegratedImu::identity(ImuBias::zero());
        for w in samples.windows(2) {
            p.integrate(&w[0].gyro, &w[0].accel, 0.005, &noise);
            assert!((p.cov - p.cov.transpose()).norm() < 1e-9);
            let min = p.cov.symmetric_eigenvalues().min();
            assert!(min >= -1e-9, "min eigenvalue {min}");
        }
    }

    #[test]
    fn monte_carlo_covariance_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = random_stream(&mut rng, 50, 0.005);
        let noise = ImuNoiseParams::default();
        let nominal = preintegrate(&samples, &ImuBias::zero(), &noise).unwrap();
        let sg = noise.gyro_cov[(0, 0)].sqrt();
        let sa = noise.accel_cov[(0, 0)].sqrt();

        let runs = 10_000;
        let mut errs = Vec::with_capacity(runs);
        for _ in 0..runs {
            let noisy: Vec<_> = samples
                .iter()
                .map(|s| {
                    let eg: Vector3<f64> =
                        Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                    let ea: Vector3<f64> =
                        Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                    ImuSample::new(s.timestamp, s.gyro + eg * sg, s.accel + ea * sa)
                })
                .collect();
            let p = preintegrate(&noisy, &ImuBias::zero(), &noise).unwrap();
            let mut e = nalgebra::SVector::<f64, 9>::zeros();
            e.fixed_rows_mut::<3>(0)
                .copy_from(&so3_log(&(nominal.delta_r.inverse() * p.delta_r)));
            e.fixed_rows_mut::<3>(3).copy_from(&(p.delta_v - nominal.delta_v));
            e.fixed_rows_mut::<3>(6).copy_from(&(p.delta_p - nominal.delta_p));
            errs.push(e);
        }
        let mean = errs.iter().sum::<nalgebra::SVector<f64, 9>>() / runs as f64;
        let mut emp = Matrix9::zeros();
        for e in &errs {
            let d = e - mean;
            emp += d * d.transpose();
        }
        emp /= (runs - 1) as f64;
        let rel = (emp - nominal.cov).norm() / nominal.cov.norm();
        assert!(rel < 0.15, "relative Frobenius error {rel}");
    }

    #[test]
    fn bias_correction_is_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = random_stream(&mut rng, 40, 0.005);
        let noise = ImuNoiseParams::default();
        let base = ImuBias::new(Vector3::new(0.01, -0.02, 0.005), Vector3::new(3.0, -1.0, 2.0));
        let p = preintegrate(&samples, &base, &noise).unwrap();
        let delta = 1e-3;
        let moved = ImuBias::new(
            base.gyro + Vector3::new(delta, -delta, delta),
            base.accel + Vector3::new(-delta, delta, delta),
        );
        let exact = preintegrate(&samples, &moved, &noise).unwrap();
        let r_err = so3_log(&(exact.delta_r.inverse() * p.corrected_delta_r(&moved))).norm();
        assert!(r_err < 1e-4, "rotation {r_err}");
        assert!((exact.delta_v - p.corrected_delta_v(&moved)).norm() < 1e-4);
        assert!((exact.delta_p - p.corrected_delta_p(&moved)).norm() < 1e-4);
    }

    #[test]
    fn split_and_compose_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = random_stream(&mut rng, 60, 0.005);
        let noise = ImuNoiseParams::default();
        let bias = ImuBias::new(Vector3::new(0.01, 0.0, -0.01), Vector3::new(1.0, 2.0, -3.0));
        let whole = preintegrate(&samples, &bias, &noise).unwrap();
        for split in [1, 17, 30, 58] {
            let a = preintegrate(&samples[..=split], &bias, &noise).unwrap();
            let b = preintegrate(&samples[split..], &bias, &noise).unwrap();
            let c = a.compose(&b);
            assert!((c.delta_r.matrix() - whole.delta_r.matrix()).norm() < 1e-9);
            assert!((c.delta_v - whole.delta_v).norm() < 1e-9);
            assert!((c.delta_p - whole.delta_p).norm() < 1e-9);
            assert!((c.delta_t - whole.delta_t).abs() < 1e-12);
            assert!((c.cov - whole.cov).norm() < 1e-9 * whole.cov.norm().max(1.0));
            let (jc, jw) = (c.jacobians, whole.jacobians);
            assert!((jc.dr_dbg - jw.dr_dbg).norm() < 1e-9);
            assert!((jc.dv_dbg - jw.dv_dbg).norm() < 1e-9);
            assert!((jc.dp_dbg - jw.dp_dbg).norm() < 1e-9);
            assert!((jc.dv_dba - jw.dv_dba).norm() < 1e-9);
            assert!((jc.dp_dba - jw.dp_dba).norm() < 1e-9);
        }
    }

    #[test]
    fn gyro_bias_seed() {
        let w = Vector3::new(0.02, 0.0, 0.0);
        assert_eq!(seed_gyro_bias(&w, &w), Vector3::zeros());
        let b = seed_gyro_bias(&Vector3::new(0.01, 0.0, 0.0), &w);
        assert!((b - Vector3::new(0.01, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn gravity_seed_direct_formula() {
        let mut p = PreintegratedImu::identity(ImuBias::zero());
        p.delta_t = 1.0;
        let g = seed_gravity(
            &Vector3::zeros(),
            &Vector3::new(10.0, 0.0, 0.0),
            &Rotation::identity(),
            &p,
        )
        .unwrap();
        assert!((g - Vector3::new(10.0, 0.0, 0.0)).norm() < 1e-12);
        p.delta_t = 0.0;
        assert!(matches!(
            seed_gravity(&Vector3::zeros(), &Vector3::zeros(), &Rotation::identity(), &p),
            Err(Error::ZeroDuration)
        ));
    }

    #[test]
    fn gravity_seed_stationary() {
        let r = so3_exp(&Vector3::new(0.2, -0.4, 0.1));
        let g = Vector3::new(0.0, 0.0, -981.0);
        let meas = r.inverse() * (-g);
        let samples: Vec<_> = (0..11)
            .map(|k| ImuSample::new(k as f64 * 0.01, Vector3::zeros(), meas))
            .collect();
        let p = preintegrate(&samples, &ImuBias::zero(), &ImuNoiseParams::default()).unwrap();
        let est = seed_gravity(&Vector3::zeros(), &Vector3::zeros(), &r, &p).unwrap();
        assert!((est - g).norm() < 1e-9);
    }

    #[test]
    fn delta_v_residual_linear_in_vj() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = random_stream(&mut rng, 10, 0.005);
        let p = preintegrate(&samples, &ImuBias::zero(), &ImuNoiseParams::default()).unwrap();
        let g = GravityDir::from_vector(&Vector3::new(0.1, 0.2, -1.0)).unwrap();
        let vi = Vector3::new(1.0, 2.0, 3.0);
        let vj = Vector3::new(-1.0, 0.5, 2.0);
        let r = Rotation::identity();
        let b = ImuBias::zero();
        let r0 = residual_delta_v(&vi, &vj, &r, &g, &p, &b);
        let r1 = residual_delta_v(&vi, &(vj + Vector3::x()), &r, &g, &p, &b);
        assert!((r1 - r0 - Vector3::x()).norm() < 1e-12);
    }

    #[test]
    fn delta_v_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = random_stream(&mut rng, 12, 0.005);
        let lin = ImuBias::new(Vector3::new(0.01, 0.0, 0.02), Vector3::new(2.0, -1.0, 0.5));
        let p = preintegrate(&samples, &lin, &ImuNoiseParams::default()).unwrap();
        let g = GravityDir::from_vector(&Vector3::new(0.1, 0.9, -0.3)).unwrap();
        let ri = so3_exp(&Vector3::new(0.3, -0.1, 0.2));
        let vi = Vector3::new(10.0, -4.0, 3.0);
        let vj = Vector3::new(12.0, -3.0, 1.0);
        let bias = ImuBias::new(Vector3::new(0.015, 0.01, 0.0), Vector3::new(1.0, 0.0, 1.5));
        let jac = residual_delta_v_jacobians(&ri, &g, &p);
        let eps = 1e-6;
        let check = |analytic: Vector3<f64>, plus: Vector3<f64>, minus: Vector3<f64>| {
            let fd = (plus - minus) / (2.0 * eps);
            let scale = fd.norm().max(analytic.norm()).max(1e-8);
            assert!((fd - analytic).norm() / scale < 1e-4, "{fd:?} vs {analytic:?}");
        };
        for k in 0..3 {
            let d = Vector3::ith(k, eps);
            check(
                jac.d_vi.column(k).into(),
                residual_delta_v(&(vi + d), &vj, &ri, &g, &p, &bias),
                residual_delta_v(&(vi - d), &vj, &ri, &g, &p, &bias),
            );
            check(
                jac.d_vj.column(k).into(),
                residual_delta_v(&vi, &(vj + d), &ri, &g, &p, &bias),
                residual_delta_v(&vi, &(vj - d), &ri, &g, &p, &bias),
            );
            let bg = |s: f64| ImuBias::new(bias.gyro + d * s, bias.accel);
            check(
                jac.d_bg.column(k).into(),
                residual_delta_v(&vi, &vj, &ri, &g, &p, &bg(1.0)),
                residual_delta_v(&vi, &vj, &ri, &g, &p, &bg(-1.0)),
            );
            let ba = |s: f64| ImuBias::new(bias.gyro, bias.accel + d * s);
            check(
                jac.d_ba.column(k).into(),
                residual_delta_v(&vi, &vj, &ri, &g, &p, &ba(1.0)),
                residual_delta_v(&vi, &vj, &ri, &g, &p, &ba(-1.0)),
            );
        }
        for k in 0..2 {
            let d = nalgebra::Vector2::ith(k, eps);
            check(
                jac.d_gravity.column(k).into(),
                residual_delta_v(&vi, &vj, &ri, &g.retract(&d), &p, &bias),
                residual_delta_v(&vi, &vj, &ri, &g.retract(&-d), &p, &bias),
            );
        }
    }

    #[test]
    fn bucketing_interpolates_boundaries() {
        let samples: Vec<_> = (0..11)
            .map(|k| {
                let t = k as f64 * 0.01;
                ImuSample::new(t, Vector3::new(t, 0.0, 0.0), Vector3::new(0.0, 100.0 * t, 0.0))
            })
            .collect();
        let b = bucket_samples(&samples, 0.015, 0.052).unwrap();
        assert_eq!(b.len(), 2 + 4);
        assert!((b[0].timestamp - 0.015).abs() < 1e-15);
        assert!((b[0].gyro.x - 0.015).abs() < 1e-12);
        assert!((b.last().unwrap().accel.y - 5.2).abs() < 1e-9);
        assert!(b.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
        // Boundary landing exactly on a sample does not duplicate it.
        let b = bucket_samples(&samples, 0.02, 0.05).unwrap();
        assert_eq!(b.len(), 4);
        assert!(bucket_samples(&samples, 0.05, 0.2).is_err());
    }

    #[test]
    fn csv_parse_header_and_errors() {
        let text = "t,wx,wy,wz,ax,ay,az\n0.0, 0, 0, 0, 0, 0, 981\n0.005,0.1,0,0,0,0,981 # note\n";
        let s = parse_imu_csv(text, Path::new("imu.csv")).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].gyro.x, 0.1);
        let shuffled = "0.005,0,0,0,0,0,0\n0.0,0,0,0,0,0,0\n";
        let err = parse_imu_csv(shuffled, Path::new("imu.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn csv_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples = random_stream(&mut rng, 20, 0.005);
        let back = parse_imu_csv(&format_imu_csv(&samples), Path::new("x")).unwrap();
        for (a, b) in samples.iter().zip(&back) {
            assert!((a.timestamp - b.timestamp).abs() < 1e-9);
            assert!((a.gyro - b.gyro).norm() <= 1e-8 * a.gyro.norm().max(1e-3));
            assert!((a.accel - b.accel).norm() <= 1e-8 * a.accel.norm());
        }
    }
}
