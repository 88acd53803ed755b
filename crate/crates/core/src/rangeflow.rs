//! Dense range flow between two depth frames.
//!
//! Every pixel that survives the adaptive mask contributes one linear
//! constraint on the camera twist `[v_x, v_y, v_z, ω_x, ω_y, ω_z]`
//! (camera frame x-right, y-down, z-forward). The constraints are built
//! coarse-to-fine on a depth pyramid: each finer level warps the second
//! frame by the current estimate and solves for the remaining motion.

use nalgebra::{DVector, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geom::integrate_twist;

/// Camera twist `[v (cm/s); ω (rad/s)]` in the camera frame.
pub type Twist = Vector6<f64>;

/// Pin-hole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cy > 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Intrinsics of the half-resolution image (pixel centers at integers).
    pub fn downsampled(&self) -> Self {
        Self {
            fx: self.fx * 0.5,
            fy: self.fy * 0.5,
            cx: (self.cx + 0.5) * 0.5 - 0.5,
            cy: (self.cy + 0.5) * 0.5 - 0.5,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }
}

/// Timestamped depth image in cm; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub timestamp: f64,
    pub intrinsics: Intrinsics,
    depth: Vec<f64>,
}

impl DepthFrame {
    /// Row-major depth buffer. NaN becomes 0 (invalid); negative or
    /// infinite values are rejected.
    pub fn new(timestamp: f64, intrinsics: Intrinsics, mut depth: Vec<f64>) -> Result<Self> {
        if depth.len() != intrinsics.width * intrinsics.height {
            return Err(Error::DimensionMismatch {
                expected: (intrinsics.width, intrinsics.height),
                got: (depth.len(), 1),
            });
        }
        if !timestamp.is_finite() {
            return Err(Error::NonFinite("frame timestamp"));
        }
        for z in depth.iter_mut() {
            if z.is_nan() {
                *z = 0.0;
            } else if !z.is_finite() || *z < 0.0 {
                return Err(Error::InvalidDepth(*z));
            }
        }
        Ok(Self {
            timestamp,
            intrinsics,
            depth,
        })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.intrinsics.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&z| z > 0.0).count()
    }

    /// Half-resolution frame: a [1 3 3 1] Gaussian over valid pixels.
    /// A coarse pixel is invalid when any of its 2x2 parents is.
    pub fn downsample(&self) -> DepthFrame {
        const TAPS: [f64; 4] = [1.0, 3.0, 3.0, 1.0];
        let k = self.intrinsics.downsampled();
        let (w, h) = (self.width() as isize, self.height() as isize);
        let mut out = vec![0.0; k.width * k.height];
        for j in 0..k.height {
            for i in 0..k.width {
                let (u0, v0) = (2 * i, 2 * j);
                if self.at(u0, v0) <= 0.0
                    || self.at(u0 + 1, v0) <= 0.0
                    || self.at(u0, v0 + 1) <= 0.0
                    || self.at(u0 + 1, v0 + 1) <= 0.0
                {
                    continue;
                }
                let (mut acc, mut norm) = (0.0, 0.0);
                for (dy, wy) in TAPS.iter().enumerate() {
                    let v = v0 as isize + dy as isize - 1;
                    if v < 0 || v >= h {
                        continue;
                    }
                    for (dx, wx) in TAPS.iter().enumerate() {
                        let u = u0 as isize + dx as isize - 1;
                        if u < 0 || u >= w {
                            continue;
                        }
                        let z = self.at(u as usize, v as usize);
                        if z > 0.0 {
                            acc += wx * wy * z;
                            norm += wx * wy;
                        }
                    }
                }
                out[j * k.width + i] = acc / norm;
            }
        }
        DepthFrame {
            timestamp: self.timestamp,
            intrinsics: k,
            depth: out,
        }
    }

    /// Bilinear sample at a sub-pixel location. `None` when any of the
    /// four neighbors is invalid, out of bounds, or they straddle a depth
    /// discontinuity.
    fn sample(&self, u: f64, v: f64) -> Option<f64> {
        const EPS: f64 = 1e-9;
        let (wmax, hmax) = ((self.width() - 1) as f64, (self.height() - 1) as f64);
        if !(u > -EPS && v > -EPS && u < wmax + EPS && v < hmax + EPS) {
            return None;
        }
        let (u, v) = (u.clamp(0.0, wmax), v.clamp(0.0, hmax));
        let u0 = (u.floor() as usize).min(self.width().saturating_sub(2));
        let v0 = (v.floor() as usize).min(self.height().saturating_sub(2));
        let z = [
            self.at(u0, v0),
            self.at(u0 + 1, v0),
            self.at(u0, v0 + 1),
            self.at(u0 + 1, v0 + 1),
        ];
        let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = z.iter().copied().fold(0.0, f64::max);
        if lo <= 0.0 || hi - lo > 0.05 * lo {
            return None;
        }
        let (a, b) = (u - u0 as f64, v - v0 as f64);
        Some(
            z[0] * (1.0 - a) * (1.0 - b)
                + z[1] * a * (1.0 - b)
                + z[2] * (1.0 - a) * b
                + z[3] * a * b,
        )
    }
}

/// Spatial (cm/px) and temporal (cm/s) depth derivatives on the average
/// of two frames.
#[derive(Debug, Clone)]
pub struct DepthDerivatives {
    pub width: usize,
    pub height: usize,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub dt: Vec<f64>,
    /// Average of the two depth images.
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    /// Seconds between the frames.
    pub interval: f64,
}

impl DepthDerivatives {
    pub fn gradient_norm(&self, idx: usize) -> f64 {
        self.du[idx].hypot(self.dv[idx])
    }
}

/// Central differences on the averaged frame; the temporal derivative is
/// the frame difference over the time step. A pixel is invalid when any
/// sample of its stencil is invalid in either frame.
pub fn depth_derivatives(prev: &DepthFrame, next: &DepthFrame) -> Result<DepthDerivatives> {
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(Error::DimensionMismatch {
            expected: (prev.width(), prev.height()),
            got: (next.width(), next.height()),
        });
    }
    let interval = next.timestamp - prev.timestamp;
    if !(interval > 0.0) {
        return Err(Error::NonPositiveDt(interval));
    }
    let (w, h) = (prev.width(), prev.height());
    let n = w * h;
    let mut avg = vec![0.0; n];
    let mut ok = vec![false; n];
    for i in 0..n {
        let (a, b) = (prev.depth[i], next.depth[i]);
        if a > 0.0 && b > 0.0 {
            avg[i] = 0.5 * (a + b);
            ok[i] = true;
        }
    }
    let mut d = DepthDerivatives {
        width: w,
        height: h,
        du: vec![0.0; n],
        dv: vec![0.0; n],
        dt: vec![0.0; n],
        depth: avg,
        valid: vec![false; n],
        interval,
    };
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            let i = v * w + u;
            if !(ok[i] && ok[i - 1] && ok[i + 1] && ok[i - w] && ok[i + w]) {
                continue;
            }
            d.du[i] = 0.5 * (d.depth[i + 1] - d.depth[i - 1]);
            d.dv[i] = 0.5 * (d.depth[i + w] - d.depth[i - w]);
            d.dt[i] = (next.depth[i] - prev.depth[i]) / interval;
            d.valid[i] = true;
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    /// Multiple of the median gradient magnitude.
    pub kappa: f64,
    /// Floor of the threshold, cm/px.
    pub kappa_abs: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            kappa: 5.0,
            kappa_abs: 4.0,
        }
    }
}

/// `max(κ · median |∇Z|, κ_abs)` over the valid pixels.
pub fn edge_threshold(derivs: &DepthDerivatives, params: &MaskParams) -> f64 {
    let mut mags: Vec<f64> = (0..derivs.valid.len())
        .filter(|&i| derivs.valid[i])
        .map(|i| derivs.gradient_norm(i))
        .collect();
    if mags.is_empty() {
        return params.kappa_abs;
    }
    let mid = mags.len() / 2;
    let (_, median, _) = mags.select_nth_unstable_by(mid, f64::total_cmp);
    (params.kappa * *median).max(params.kappa_abs)
}

/// Pixels usable for range flow: valid depth in `frame`, a fully valid
/// stencil, gradient magnitude strictly below the adaptive threshold, and
/// not on the one-pixel border ring.
pub fn adaptive_mask(frame: &DepthFrame, derivs: &DepthDerivatives, params: &MaskParams) -> Vec<bool> {
    mask_with_threshold(frame, derivs, edge_threshold(derivs, params))
}

pub fn mask_with_threshold(frame: &DepthFrame, derivs: &DepthDerivatives, threshold: f64) -> Vec<bool> {
    let (w, h) = (derivs.width, derivs.height);
    let mut mask = vec![false; w * h];
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            let i = v * w + u;
            mask[i] = derivs.valid[i] && frame.depth[i] > 0.0 && derivs.gradient_norm(i) < threshold;
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightParams {
    pub lambda_grad: f64,
    pub lambda_temporal: f64,
    pub lambda_depth: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self {
            lambda_grad: 0.01,
            lambda_temporal: 0.01,
            lambda_depth: 1e-6,
        }
    }
}

/// Unnormalized per-pixel weight
/// `1 / (1 + λ_g |∇Z|² + λ_t (Z_t Δt)² + λ_z Z²)`.
pub fn compute_weight(z: f64, zu: f64, zv: f64, zt: f64, interval: f64, p: &WeightParams) -> f64 {
    let zt_step = zt * interval;
    1.0 / (1.0
        + p.lambda_grad * (zu * zu + zv * zv)
        + p.lambda_temporal * zt_step * zt_step
        + p.lambda_depth * z * z)
}

/// Range-flow constraint at pixel `(u, v)` with depth `z`:
/// returns the row over `[v_x, v_y, v_z, ω_x, ω_y, ω_z]` and the
/// right-hand side `−∂Z/∂t`.
pub fn constraint_row(
    u: f64,
    v: f64,
    z: f64,
    zu: f64,
    zv: f64,
    zt: f64,
    k: &Intrinsics,
) -> Result<(Vector6<f64>, f64)> {
    if !(z > 0.0) {
        return Err(Error::InvalidDepth(z));
    }
    let x = (u - k.cx) * z / k.fx;
    let y = (v - k.cy) * z / k.fy;
    let gu = k.fx * zu / z;
    let gv = k.fy * zv / z;
    // (1 + x f_x Z_u / z² + y f_y Z_v / z²) multiplies (v_z + y ω_x − x ω_y)
    let radial = 1.0 + (x * gu + y * gv) / z;
    let row = Vector6::new(
        -gu,
        -gv,
        radial,
        radial * y + gv * z,
        -radial * x - gu * z,
        gu * y - gv * x,
    );
    Ok((row, -zt))
}

/// Weighted normal equations `Σ w² a aᵀ`, `Σ w² a b` and `Σ w² b²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalEquations {
    pub hessian: Matrix6<f64>,
    pub rhs: Vector6<f64>,
    pub rhs_sq: f64,
}

impl NormalEquations {
    /// Weighted squared residual `‖W(Ax − B)‖²`.
    pub fn cost(&self, x: &Twist) -> f64 {
        (x.dot(&(self.hessian * x)) - 2.0 * x.dot(&self.rhs) + self.rhs_sq).max(0.0)
    }
}

/// Twist estimate from a 6x6 system, with the directions the data
/// cannot determine.
#[derive(Debug, Clone)]
pub struct TwistSolution {
    pub twist: Twist,
    pub unobservable: Vec<Twist>,
}

/// Condition number of the Jacobi-scaled pair normal matrix above which a
/// direction counts as unobservable. Depth quantization lifts the null
/// directions of a single plane to about 1e-5 of the largest eigenvalue,
/// while textured scenes stay above 1e-2.
pub const CONDITION_LIMIT: f64 = 1e4;

/// Jacobi-scaled eigen solve of `H x = b`. Directions whose scaled
/// eigenvalue falls below `1 / CONDITION_LIMIT` of the largest are
/// reported and left out of the solution.
pub fn solve_normal(h: &Matrix6<f64>, b: &Vector6<f64>) -> TwistSolution {
    let mut scale = Vector6::zeros();
    let mut unobservable = Vec::new();
    for i in 0..6 {
        let d = h[(i, i)];
        if d > 0.0 && d.is_finite() {
            scale[i] = 1.0 / d.sqrt();
        } else {
            unobservable.push(Vector6::ith(i, 1.0));
        }
    }
    let scaled = Matrix6::from_fn(|i, j| h[(i, j)] * scale[i] * scale[j]);
    let eig = scaled.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let sb = b.component_mul(&scale);
    let mut y = Vector6::zeros();
    for k in 0..6 {
        let lambda = eig.eigenvalues[k];
        let vec = eig.eigenvectors.column(k);
        if max > 0.0 && lambda > max / CONDITION_LIMIT {
            y += vec * (vec.dot(&sb) / lambda);
        } else if vec.iter().zip(scale.iter()).any(|(c, s)| c.abs() > 1e-9 && *s > 0.0) {
            let dir: Twist = vec.component_mul(&scale);
            unobservable.push(dir.normalize());
        }
    }
    TwistSolution {
        twist: y.component_mul(&scale),
        unobservable,
    }
}

/// Relative size below which a diagonal entry of the normal matrix is
/// treated as zero.
const NEGLIGIBLE_DIAGONAL: f64 = 1e-14;

/// The weighted linear constraint system `W A x = W B` of one frame pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowLinearSystem {
    pub coeff: Vec<Vector6<f64>>,
    pub rhs: Vec<f64>,
    pub weights: Vec<f64>,
    /// Source pixel `(u, v)` of every row at the level it was built on.
    pub pixel_index: Vec<(u32, u32)>,
}

impl FlowLinearSystem {
    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }

    pub fn normal_equations(&self) -> NormalEquations {
        let mut hessian = Matrix6::zeros();
        let mut rhs = Vector6::zeros();
        let mut rhs_sq = 0.0;
        for ((a, b), w) in self.coeff.iter().zip(&self.rhs).zip(&self.weights) {
            let w2 = w * w;
            hessian.ger(w2, a, a, 1.0);
            rhs += a * (w2 * b);
            rhs_sq += w2 * b * b;
        }
        // Components the rows only touch through round-off are zeroed.
        let max = hessian.diagonal().max();
        for i in 0..6 {
            if hessian[(i, i)] <= NEGLIGIBLE_DIAGONAL * max {
                hessian.row_mut(i).fill(0.0);
                hessian.column_mut(i).fill(0.0);
                rhs[i] = 0.0;
            }
        }
        NormalEquations {
            hessian,
            rhs,
            rhs_sq,
        }
    }

    /// `W A x − W B`.
    pub fn weighted_residual(&self, x: &Twist) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.coeff
                .iter()
                .zip(&self.rhs)
                .zip(&self.weights)
                .map(|((a, b), w)| w * (a.dot(x) - b)),
        )
    }

    /// Re-expresses a system solved for the motion remaining after
    /// warping by `base` as a system over the full twist.
    pub fn shifted(mut self, base: &Twist) -> Self {
        for (a, b) in self.coeff.iter().zip(self.rhs.iter_mut()) {
            *b += a.dot(base);
        }
        self
    }

    pub fn solve(&self) -> TwistSolution {
        let ne = self.normal_equations();
        solve_normal(&ne.hessian, &ne.rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub mask: MaskParams,
    pub weights: WeightParams,
    /// The coarsest pyramid level keeps at least this many columns.
    pub min_coarse_width: usize,
    /// Upper bound on the number of pyramid levels (1 = full resolution only).
    pub max_levels: usize,
    pub iterations_per_level: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            mask: MaskParams::default(),
            weights: WeightParams::default(),
            min_coarse_width: 40,
            max_levels: 8,
            iterations_per_level: 3,
        }
    }
}

/// Builds the constraint system for two frames at the same resolution.
/// Weights are normalized so the largest is 1.
pub fn assemble(prev: &DepthFrame, next: &DepthFrame, params: &FlowParams) -> Result<FlowLinearSystem> {
    let derivs = depth_derivatives(prev, next)?;
    let mask = adaptive_mask(prev, &derivs, &params.mask);
    let k = &prev.intrinsics;
    let mut sys = FlowLinearSystem::default();
    for v in 0..derivs.height {
        for u in 0..derivs.width {
            let i = v * derivs.width + u;
            if !mask[i] {
                continue;
            }
            let z = derivs.depth[i];
            let (row, rhs) = constraint_row(
                u as f64,
                v as f64,
                z,
                derivs.du[i],
                derivs.dv[i],
                derivs.dt[i],
                k,
            )?;
            sys.coeff.push(row);
            sys.rhs.push(rhs);
            sys.weights.push(compute_weight(
                z,
                derivs.du[i],
                derivs.dv[i],
                derivs.dt[i],
                derivs.interval,
                &params.weights,
            ));
            sys.pixel_index.push((u as u32, v as u32));
        }
    }
    if sys.is_empty() {
        return Err(Error::DegenerateSystem);
    }
    let max = sys.weights.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        sys.weights.iter_mut().for_each(|w| *w /= max);
    }
    Ok(sys)
}

/// Number of pyramid levels such that the coarsest keeps at least
/// `min_width` columns (always at least one level).
pub fn pyramid_levels(width: usize, min_width: usize) -> usize {
    let mut levels = 1;
    let mut w = width;
    while w / 2 >= min_width.max(1) {
        w /= 2;
        levels += 1;
    }
    levels
}

pub fn pyramid(frame: &DepthFrame, levels: usize) -> Vec<DepthFrame> {
    let mut out = vec![frame.clone()];
    for _ in 1..levels {
        let next = out.last().map(DepthFrame::downsample).unwrap_or_else(|| frame.clone());
        out.push(next);
    }
    out
}

/// Resamples `next` into the view of `prev` under the motion `twist`
/// held over the frame interval, so the remaining motion between `prev`
/// and the result is what `twist` does not explain.
pub fn warp_next(prev: &DepthFrame, next: &DepthFrame, twist: &Twist) -> DepthFrame {
    let dt = next.timestamp - prev.timestamp;
    let v = twist.fixed_rows::<3>(0).into_owned();
    let w = twist.fixed_rows::<3>(3).into_owned();
    let (rot, trans) = integrate_twist(&v, &w, dt);
    let rot_t = rot.inverse();
    let k = &prev.intrinsics;
    let mut out = vec![0.0; prev.depth.len()];
    for j in 0..prev.height() {
        for i in 0..prev.width() {
            let z1 = prev.at(i, j);
            if z1 <= 0.0 {
                continue;
            }
            let p = k.backproject(i as f64, j as f64, z1);
            let q = rot_t * (p - trans);
            if q.z <= 0.0 {
                continue;
            }
            let (u2, v2) = next.intrinsics.project(&q);
            if let Some(z2) = next.sample(u2, v2) {
                let back = rot * next.intrinsics.backproject(u2, v2, z2) + trans;
                if back.z > 0.0 {
                    out[j * prev.width() + i] = back.z;
                }
            }
        }
    }
    DepthFrame {
        timestamp: next.timestamp,
        intrinsics: prev.intrinsics,
        depth: out,
    }
}

/// Result of coarse-to-fine range flow on one frame pair.
#[derive(Debug, Clone)]
pub struct PairFlow {
    pub twist: Twist,
    /// Full-resolution system linearized at `twist`, expressed over the
    /// absolute twist.
    pub system: FlowLinearSystem,
    pub unobservable: Vec<Twist>,
}

/// Estimates the camera twist between two frames.
pub fn estimate_twist(prev: &DepthFrame, next: &DepthFrame, params: &FlowParams) -> Result<PairFlow> {
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(Error::DimensionMismatch {
            expected: (prev.width(), prev.height()),
            got: (next.width(), next.height()),
        });
    }
    if !(next.timestamp > prev.timestamp) {
        return Err(Error::NonPositiveDt(next.timestamp - prev.timestamp));
    }
    let levels = pyramid_levels(prev.width(), params.min_coarse_width).min(params.max_levels.max(1));
    let prev_pyr = pyramid(prev, levels);
    let next_pyr = pyramid(next, levels);

    let mut twist = Twist::zeros();
    for level in (0..levels).rev() {
        for _ in 0..params.iterations_per_level {
            let warped = warp_next(&prev_pyr[level], &next_pyr[level], &twist);
            let sys = match assemble(&prev_pyr[level], &warped, params) {
                Ok(s) => s,
                // A coarse level may lose every pixel to the mask; finer
                // levels still have a chance.
                Err(Error::DegenerateSystem) if level > 0 => break,
                Err(e) => return Err(e),
            };
            let step = sys.solve().twist;
            twist += step;
            if step.norm() < 1e-9 {
                break;
            }
        }
    }
    let warped = warp_next(prev, next, &twist);
    let system = assemble(prev, &warped, params)?.shifted(&twist);
    let solution = system.solve();
    Ok(PairFlow {
        twist: solution.twist,
        system,
        unobservable: solution.unobservable,
    })
}

/// Back-projected points of `frame` with the velocity `v + ω × p` that
/// the rigid twist induces at each of them.
pub fn rigid_velocity_field(frame: &DepthFrame, twist: &Twist) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let v = twist.fixed_rows::<3>(0).into_owned();
    let w = twist.fixed_rows::<3>(3).into_owned();
    let k = &frame.intrinsics;
    let mut out = Vec::with_capacity(frame.valid_count());
    for row in 0..k.height {
        for col in 0..k.width {
            let z = frame.at(col, row);
            if z > 0.0 {
                let p = k.backproject(col as f64, row as f64, z);
                out.push((p, v + w.cross(&p)));
            }
        }
    }
    out
}
