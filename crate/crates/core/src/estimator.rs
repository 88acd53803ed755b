//! Sliding-window visual-inertial velocity estimator.
//!
//! The optimized state holds, per frame, the body-frame linear and angular
//! velocity, plus the gravity direction in the frame of the oldest window
//! slot and the gyro/accelerometer biases: `6N + 8` parameters.
//! Orientations of later slots relative to the first are dead-reckoned from
//! the bias-corrected preintegrated rotations and are not optimized.

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix3x2, Vector3};

use crate::error::{Error, Result};
use crate::geom::{skew, so3_exp, GravityDir, Rotation};
use crate::imu::{ImuBias, ImuNoiseParams, PreintegratedImu};
use crate::rangeflow::{FlowLinearSystem, NormalEquations, PairFlow, Twist};

/// Parameter offsets of a window with `frames` slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub frames: usize,
}

impl Layout {
    pub fn new(frames: usize) -> Self {
        Self { frames }
    }

    pub fn dim(&self) -> usize {
        6 * self.frames + 8
    }

    pub fn lin_vel(&self, slot: usize) -> usize {
        6 * slot
    }

    pub fn ang_vel(&self, slot: usize) -> usize {
        6 * slot + 3
    }

    pub fn gravity(&self) -> usize {
        6 * self.frames
    }

    pub fn bias_gyro(&self) -> usize {
        6 * self.frames + 2
    }

    pub fn bias_accel(&self) -> usize {
        6 * self.frames + 5
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameState {
    pub timestamp: f64,
    /// cm/s, body frame.
    pub lin_vel: Vector3<f64>,
    /// rad/s, body frame.
    pub ang_vel: Vector3<f64>,
}

impl FrameState {
    pub fn twist(&self) -> Twist {
        Twist::new(
            self.lin_vel.x,
            self.lin_vel.y,
            self.lin_vel.z,
            self.ang_vel.x,
            self.ang_vel.y,
            self.ang_vel.z,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowState {
    pub frames: Vec<FrameState>,
    /// Gravity in the camera frame of slot 0.
    pub gravity: GravityDir,
    pub bias: ImuBias,
    /// Orientation of every slot relative to slot 0.
    pub orientations: Vec<Rotation>,
}

impl WindowState {
    pub fn layout(&self) -> Layout {
        Layout::new(self.frames.len())
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    /// Applies a tangent increment: additive on velocities and biases,
    /// the S² retraction on gravity. Orientations are copied unchanged.
    pub fn retract(&self, delta: &DVector<f64>) -> WindowState {
        let lay = self.layout();
        assert_eq!(delta.len(), lay.dim());
        let mut out = self.clone();
        for (l, f) in out.frames.iter_mut().enumerate() {
            f.lin_vel += delta.fixed_rows::<3>(lay.lin_vel(l));
            f.ang_vel += delta.fixed_rows::<3>(lay.ang_vel(l));
        }
        out.gravity = self.gravity.retract(&delta.fixed_rows::<2>(lay.gravity()).into_owned());
        out.bias.gyro += delta.fixed_rows::<3>(lay.bias_gyro());
        out.bias.accel += delta.fixed_rows::<3>(lay.bias_accel());
        out
    }

    /// Gravity in the camera frame of `slot`.
    pub fn gravity_in(&self, slot: usize) -> Vector3<f64> {
        self.orientations[slot].inverse() * self.gravity.vector()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Visual,
    DeltaV,
    AngularVelocity,
    BiasGyro,
    BiasAccel,
    Prior,
}

/// Information matrix of a residual block.
#[derive(Debug, Clone, PartialEq)]
pub enum Information {
    /// `s · I`
    Isotropic(f64),
    Dense(DMatrix<f64>),
}

impl Information {
    pub fn to_dense(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Information::Isotropic(s) => DMatrix::identity(dim, dim) * *s,
            Information::Dense(m) => m.clone(),
        }
    }
}

/// A residual with its Jacobian over the full `6N + 8` tangent space.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub kind: BlockKind,
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub information: Information,
}

impl ResidualBlock {
    /// `rᵀ Λ r`.
    pub fn cost(&self) -> f64 {
        match &self.information {
            Information::Isotropic(s) => s * self.residual.norm_squared(),
            Information::Dense(m) => self.residual.dot(&(m * &self.residual)),
        }
    }

    fn accumulate(&self, h: &mut DMatrix<f64>, g: &mut DVector<f64>) {
        let (jt_l, jt_l_r) = match &self.information {
            Information::Isotropic(s) => {
                let jt = self.jacobian.transpose() * *s;
                let jr = &jt * &self.residual;
                (jt, jr)
            }
            Information::Dense(m) => {
                let jt = self.jacobian.transpose() * m;
                let jr = &jt * &self.residual;
                (jt, jr)
            }
        };
        *h += &jt_l * &self.jacobian;
        *g += jt_l_r;
    }
}

/// Visual block `W A ξ − W B` for the twist of `slot`. `None` (with a
/// warning) when the system has no rows.
pub fn build_visual_block(system: &FlowLinearSystem, slot: usize, layout: &Layout, state: &WindowState) -> Option<ResidualBlock> {
    if system.is_empty() {
        warn!("empty range-flow system for slot {slot}; block omitted");
        return None;
    }
    let xi = state.frames[slot].twist();
    let m = system.len();
    let mut jac = DMatrix::zeros(m, layout.dim());
    let mut res = DVector::zeros(m);
    let col = layout.lin_vel(slot);
    for (i, ((a, b), w)) in system.coeff.iter().zip(&system.rhs).zip(&system.weights).enumerate() {
        for c in 0..6 {
            jac[(i, col + c)] = w * a[c];
        }
        res[i] = w * (a.dot(&xi) - b);
    }
    Some(ResidualBlock {
        kind: BlockKind::Visual,
        residual: res,
        jacobian: jac,
        information: Information::Isotropic(1.0),
    })
}

/// `r_ω = ω_l − (ω̃_l − b_g)`, weighted by `Σ_ω⁻¹`.
pub fn angular_velocity_block(state: &WindowState, slot: usize, gyro: &Vector3<f64>, info: &Matrix3<f64>) -> ResidualBlock {
    let lay = state.layout();
    let r = state.frames[slot].ang_vel - (gyro - state.bias.gyro);
    let mut jac = DMatrix::zeros(3, lay.dim());
    jac.fixed_view_mut::<3, 3>(0, lay.ang_vel(slot)).copy_from(&Matrix3::identity());
    jac.fixed_view_mut::<3, 3>(0, lay.bias_gyro()).copy_from(&Matrix3::identity());
    dense_block(BlockKind::AngularVelocity, r, jac, info)
}

/// Preintegrated velocity residual between slots `slot − 1` and `slot`,
/// written with body-frame velocities:
/// `r = R_iᵀ R_j v_j − v_i − R_iᵀ g Δt − Δṽ(b)`. Orientations are held
/// fixed.
pub fn delta_v_block(state: &WindowState, slot: usize, preint: &PreintegratedImu, info: &Matrix3<f64>) -> ResidualBlock {
    assert!(slot >= 1);
    let lay = state.layout();
    let (i, j) = (slot - 1, slot);
    let ri_t = state.orientations[i].inverse();
    let rij = (ri_t * state.orientations[j]).into_inner();
    let g = &state.gravity;
    let r = rij * state.frames[j].lin_vel
        - state.frames[i].lin_vel
        - ri_t * g.vector() * preint.delta_t
        - preint.corrected_delta_v(&state.bias);
    let mut jac = DMatrix::zeros(3, lay.dim());
    jac.fixed_view_mut::<3, 3>(0, lay.lin_vel(i)).copy_from(&(-Matrix3::identity()));
    jac.fixed_view_mut::<3, 3>(0, lay.lin_vel(j)).copy_from(&rij);
    let dg: Matrix3x2<f64> = -(ri_t.matrix() * g.vector_jacobian()) * preint.delta_t;
    jac.fixed_view_mut::<3, 2>(0, lay.gravity()).copy_from(&dg);
    jac.fixed_view_mut::<3, 3>(0, lay.bias_gyro()).copy_from(&(-preint.jacobians.dv_dbg));
    jac.fixed_view_mut::<3, 3>(0, lay.bias_accel()).copy_from(&(-preint.jacobians.dv_dba));
    dense_block(BlockKind::DeltaV, r, jac, info)
}

/// Deviation of the biases from their initial seed, weighted by `Σ_ω⁻¹`
/// and `Σ_a⁻¹`.
pub fn bias_blocks(state: &WindowState, seed: &ImuBias, noise: &ImuNoiseParams) -> [ResidualBlock; 2] {
    let lay = state.layout();
    let mut jg = DMatrix::zeros(3, lay.dim());
    jg.fixed_view_mut::<3, 3>(0, lay.bias_gyro()).copy_from(&Matrix3::identity());
    let mut ja = DMatrix::zeros(3, lay.dim());
    ja.fixed_view_mut::<3, 3>(0, lay.bias_accel()).copy_from(&Matrix3::identity());
    [
        dense_block(BlockKind::BiasGyro, state.bias.gyro - seed.gyro, jg, &invert3(&noise.gyro_cov)),
        dense_block(BlockKind::BiasAccel, state.bias.accel - seed.accel, ja, &invert3(&noise.accel_cov)),
    ]
}

fn dense_block(kind: BlockKind, r: Vector3<f64>, jac: DMatrix<f64>, info: &Matrix3<f64>) -> ResidualBlock {
    ResidualBlock {
        kind,
        residual: DVector::from_column_slice(r.as_slice()),
        jacobian: jac,
        information: Information::Dense(DMatrix::from_column_slice(3, 3, info.as_slice())),
    }
}

fn invert3(m: &Matrix3<f64>) -> Matrix3<f64> {
    m.try_inverse().unwrap_or_else(|| {
        warn!("singular noise covariance; using a pseudo-inverse");
        m.pseudo_inverse(1e-300).unwrap_or_else(|_| Matrix3::zeros())
    })
}

/// Quadratic prior left by marginalization: `r_pᵀ H* r_p`, where `r_p`
/// measures the kept parameters against the linearization point.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPrior {
    pub h_star: DMatrix<f64>,
    /// Linearization point; covers the first `frames` slots of the window.
    pub x_beta: WindowState,
    /// Timestamp of the oldest kept frame.
    pub reference_timestamp: f64,
    /// Set when the marginalized block needed regularization.
    pub regularized: bool,
}

impl MarginalPrior {
    pub fn frames(&self) -> usize {
        self.x_beta.frames.len()
    }

    /// Residual and Jacobian against a window whose first slots are the
    /// prior's slots.
    pub fn block(&self, state: &WindowState) -> ResidualBlock {
        let k = self.frames();
        let lay = state.layout();
        let play = Layout::new(k);
        assert!(lay.frames >= k);
        let mut r = DVector::zeros(play.dim());
        let mut jac = DMatrix::zeros(play.dim(), lay.dim());
        for l in 0..k {
            let (a, b) = (&state.frames[l], &self.x_beta.frames[l]);
            r.fixed_rows_mut::<3>(play.lin_vel(l)).copy_from(&(a.lin_vel - b.lin_vel));
            r.fixed_rows_mut::<3>(play.ang_vel(l)).copy_from(&(a.ang_vel - b.ang_vel));
            for c in 0..6 {
                jac[(6 * l + c, 6 * l + c)] = 1.0;
            }
        }
        let gb = self.x_beta.gravity.direction();
        let g = state.gravity.direction();
        let bb = self.x_beta.gravity.tangent_basis();
        r.fixed_rows_mut::<2>(play.gravity()).copy_from(&(bb.transpose() * gb.cross(&g)));
        let dg = bb.transpose() * skew(&gb) * (-skew(&g) * state.gravity.tangent_basis());
        jac.fixed_view_mut::<2, 2>(play.gravity(), lay.gravity()).copy_from(&dg);
        r.fixed_rows_mut::<3>(play.bias_gyro()).copy_from(&(state.bias.gyro - self.x_beta.bias.gyro));
        r.fixed_rows_mut::<3>(play.bias_accel()).copy_from(&(state.bias.accel - self.x_beta.bias.accel));
        for c in 0..6 {
            jac[(play.bias_gyro() + c, lay.bias_gyro() + c)] = 1.0;
        }
        ResidualBlock {
            kind: BlockKind::Prior,
            residual: r,
            jacobian: jac,
            information: Information::Dense(self.h_star.clone()),
        }
    }
}

/// Schur complement of the leading `marg × marg` block:
/// `H* = H_ββ − H_βα H_αα⁻¹ H_αβ`. Returns whether `H_αα` had to be
/// regularized with `1e-8·I`.
pub fn schur_complement(h: &DMatrix<f64>, marg: usize) -> (DMatrix<f64>, bool) {
    let n = h.nrows();
    let h_aa = h.view((0, 0), (marg, marg)).into_owned();
    let h_ab = h.view((0, marg), (marg, n - marg)).into_owned();
    let h_bb = h.view((marg, marg), (n - marg, n - marg)).into_owned();
    let (chol, regularized) = match h_aa.clone().cholesky() {
        Some(c) if min_diag_ratio(&c.l()) > 1e-9 => (c, false),
        _ => {
            let reg = h_aa + DMatrix::identity(marg, marg) * 1e-8;
            match reg.cholesky() {
                Some(c) => (c, true),
                None => {
                    warn!("marginalized block is not positive definite; dropping it");
                    return (h_bb, true);
                }
            }
        }
    };
    let x = chol.solve(&h_ab);
    let mut hs = h_bb - h_ab.transpose() * x;
    hs = (&hs + hs.transpose()) * 0.5;
    (hs, regularized)
}

fn min_diag_ratio(l: &DMatrix<f64>) -> f64 {
    let d: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)].abs()).collect();
    let max = d.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        0.0
    } else {
        d.iter().copied().fold(f64::INFINITY, f64::min) / max
    }
}

/// Re-expresses the window in the frame of a new slot 0 whose orientation
/// in the old reference is `delta_r`: gravity and orientations rotate by
/// `delta_rᵀ`, body-frame velocities are unchanged, and the prior's
/// gravity rows and columns are rotated into the new tangent basis.
pub fn slide_reference(state: &WindowState, prior: Option<&MarginalPrior>, delta_r: &Rotation) -> (WindowState, Option<MarginalPrior>) {
    let rt = delta_r.inverse();
    let mut out = state.clone();
    out.gravity = state.gravity.rotated(&rt);
    out.orientations = state.orientations.iter().map(|r| rt * r).collect();
    let prior = prior.map(|p| {
        let mut p = p.clone();
        let old = p.x_beta.gravity;
        let new = old.rotated(&rt);
        let t: Matrix2<f64> = new.tangent_basis().transpose() * rt.matrix() * old.tangent_basis();
        let play = Layout::new(p.frames());
        let gi = play.gravity();
        let mut m = DMatrix::identity(play.dim(), play.dim());
        m.fixed_view_mut::<2, 2>(gi, gi).copy_from(&t);
        p.h_star = &m * &p.h_star * m.transpose();
        p.h_star = (&p.h_star + p.h_star.transpose()) * 0.5;
        p.x_beta.gravity = new;
        p.x_beta.orientations = p.x_beta.orientations.iter().map(|r| rt * r).collect();
        p
    });
    (out, prior)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub initial_lambda: f64,
    pub max_escalations: usize,
    /// Condition number of the Jacobi-scaled normal matrix above which
    /// directions are reported unobservable.
    pub condition_limit: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-6,
            initial_lambda: 1e-4,
            max_escalations: 10,
            condition_limit: 1e8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    /// Window length N (frames).
    pub window: usize,
    pub marginalize: bool,
    pub noise: ImuNoiseParams,
    pub visual_noise: VisualNoise,
    pub solver: SolverOptions,
}

/// Noise assumed on the weighted range-flow residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VisualNoise {
    /// Fixed standard deviation (cm/s); 1 leaves the pixel weights as the
    /// only scaling.
    Fixed(f64),
    /// Each pair's residual variance at its own least-squares twist.
    Estimated,
}

impl Default for VisualNoise {
    fn default() -> Self {
        VisualNoise::Fixed(1.0)
    }
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window: 3,
            marginalize: false,
            noise: ImuNoiseParams::default(),
            visual_noise: VisualNoise::default(),
            solver: SolverOptions::default(),
        }
    }
}

/// Visual measurement of one frame pair, kept as normal equations over the
/// absolute twist.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFactor {
    pub normal: NormalEquations,
    /// Least-squares twist of the pair alone.
    pub twist: Twist,
    pub unobservable: Vec<Twist>,
    /// Weighted squared residual per degree of freedom at `twist`.
    pub residual_variance: f64,
}

impl VisualFactor {
    pub fn from_flow(flow: &PairFlow) -> Self {
        Self::new(&flow.system, flow.twist, flow.unobservable.clone())
    }

    pub fn from_system(system: &FlowLinearSystem) -> Self {
        let sol = system.solve();
        Self::new(system, sol.twist, sol.unobservable)
    }

    fn new(system: &FlowLinearSystem, twist: Twist, unobservable: Vec<Twist>) -> Self {
        let normal = system.normal_equations();
        let dof = system.len().saturating_sub(6).max(1) as f64;
        let residual_variance = normal.cost(&twist) / dof;
        Self {
            normal,
            twist,
            unobservable,
            residual_variance,
        }
    }

    /// Information scale `1/σ²` under `noise`.
    pub fn information_scale(&self, noise: &VisualNoise) -> f64 {
        match *noise {
            VisualNoise::Fixed(sigma) => 1.0 / (sigma * sigma),
            VisualNoise::Estimated => 1.0 / self.residual_variance.max(1e-12),
        }
    }
}

/// Everything that arrives with a new frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub timestamp: f64,
    /// Range flow between the previous frame and this one.
    pub visual: Option<VisualFactor>,
    /// IMU preintegrated between the previous frame and this one.
    pub preint: Option<PreintegratedImu>,
    /// Gyro reading at this frame's timestamp.
    pub gyro: Option<Vector3<f64>>,
}

impl FrameInput {
    pub fn new(timestamp: f64) -> Self {
        Self {
            timestamp,
            visual: None,
            preint: None,
            gyro: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    visual: Option<VisualFactor>,
    preint: Option<PreintegratedImu>,
    gyro: Option<Vector3<f64>>,
    /// Orientation frozen at marginalization; `None` when dead-reckoned.
    anchored: Option<Rotation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub cost: f64,
    pub accepted: bool,
    pub lambda: f64,
    pub step_norm: f64,
    pub gravity_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
    /// Parameters touched by at least one factor.
    pub active: Vec<usize>,
    /// Poorly constrained directions over the full parameter vector.
    pub unobservable: Vec<DVector<f64>>,
}

impl SolveReport {
    pub fn is_degenerate(&self) -> bool {
        !self.unobservable.is_empty()
    }
}

/// The sliding-window estimator (one instance per sequence).
#[derive(Debug, Clone)]
pub struct Estimator {
    config: EstimatorConfig,
    state: WindowState,
    slots: Vec<Slot>,
    prior: Option<MarginalPrior>,
    bias_seed: Option<ImuBias>,
    bias_factor: bool,
    gravity_seeded: bool,
    backfilled: bool,
    gyro_info: Matrix3<f64>,
}

impl Estimator {
    pub fn new(config: EstimatorConfig) -> Result<Self> {
        if config.window < 2 {
            return Err(Error::InvalidInput(format!("window must hold at least 2 frames, got {}", config.window)));
        }
        if matches!(config.visual_noise, VisualNoise::Fixed(s) if !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput("visual sigma must be positive".into()));
        }
        Ok(Self {
            config,
            state: WindowState {
                frames: Vec::new(),
                gravity: GravityDir::from_vector(&Vector3::y()).expect("unit vector"),
                bias: ImuBias::zero(),
                orientations: Vec::new(),
            },
            slots: Vec::new(),
            prior: None,
            bias_seed: None,
            bias_factor: false,
            gravity_seeded: false,
            backfilled: false,
            gyro_info: invert3(&config.noise.gyro_cov),
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn state(&self) -> &WindowState {
        &self.state
    }

    pub fn prior(&self) -> Option<&MarginalPrior> {
        self.prior.as_ref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of optimized parameters, `6N + 8`.
    pub fn dim(&self) -> usize {
        self.state.dim()
    }

    pub fn gravity_initialized(&self) -> bool {
        self.gravity_seeded
    }

    /// Overrides the current estimate (velocities, gravity, biases).
    pub fn set_state(&mut self, mut state: WindowState) -> Result<()> {
        if state.frames.len() != self.slots.len() {
            return Err(Error::DimensionMismatch {
                expected: (self.slots.len(), 1),
                got: (state.frames.len(), 1),
            });
        }
        self.refresh_orientations(&mut state);
        self.state = state;
        Ok(())
    }

    /// Appends a frame. A full window first loses its oldest slot, either
    /// marginalized into the prior or dropped.
    pub fn add_frame(&mut self, input: FrameInput) -> Result<()> {
        if !input.timestamp.is_finite() {
            return Err(Error::NonFinite("frame timestamp"));
        }
        if let Some(last) = self.state.frames.last() {
            if input.timestamp <= last.timestamp {
                return Err(Error::NonMonotonic {
                    what: "frame",
                    index: self.slots.len(),
                    prev: last.timestamp,
                    next: input.timestamp,
                });
            }
        }
        if self.slots.len() == self.config.window {
            if self.config.marginalize {
                self.marginalize_oldest()?;
            } else {
                self.drop_oldest();
            }
        }

        let first = self.slots.is_empty();
        let (lin_vel, ang_vel) = match (&input.visual, self.state.frames.last()) {
            (Some(v), _) if !first => (v.twist.fixed_rows::<3>(0).into_owned(), v.twist.fixed_rows::<3>(3).into_owned()),
            (_, Some(prev)) => (prev.lin_vel, prev.ang_vel),
            _ => (Vector3::zeros(), input.gyro.map(|w| w - self.state.bias.gyro).unwrap_or_else(Vector3::zeros)),
        };
        self.state.frames.push(FrameState {
            timestamp: input.timestamp,
            lin_vel,
            ang_vel,
        });
        self.state.orientations.push(Rotation::identity());
        self.slots.push(Slot {
            visual: if first { None } else { input.visual },
            preint: if first { None } else { input.preint },
            gyro: input.gyro,
            anchored: None,
        });

        // Slot 0 never carries a visual factor; start it at its
        // neighbor's twist.
        if self.slots.len() == 2 && !self.backfilled && self.slots[1].visual.is_some() {
            self.backfilled = true;
            self.state.frames[0].lin_vel = self.state.frames[1].lin_vel;
            self.state.frames[0].ang_vel = self.state.frames[1].ang_vel;
        }
        self.seed_inertial();
        let mut s = self.state.clone();
        self.refresh_orientations(&mut s);
        self.state = s;
        Ok(())
    }

    /// Bias and gravity seeds, taken once from the visual velocities.
    fn seed_inertial(&mut self) {
        if self.bias_seed.is_none() {
            let diffs: Vec<Vector3<f64>> = self
                .slots
                .iter()
                .zip(&self.state.frames)
                .filter_map(|(s, f)| match (&s.visual, &s.gyro) {
                    (Some(_), Some(w)) => Some(crate::imu::seed_gyro_bias(&f.ang_vel, w)),
                    _ => None,
                })
                .collect();
            let has_preint = self.slots.iter().any(|s| s.preint.is_some());
            if !diffs.is_empty() || has_preint {
                let bg = if diffs.is_empty() {
                    Vector3::zeros()
                } else {
                    diffs.iter().sum::<Vector3<f64>>() / diffs.len() as f64
                };
                let seed = ImuBias::new(bg, Vector3::zeros());
                self.state.bias = seed;
                self.bias_seed = Some(seed);
                self.bias_factor = true;
            }
        }
        if !self.gravity_seeded && self.slots.iter().any(|s| s.preint.is_some()) {
            let mut s = self.state.clone();
            self.refresh_orientations(&mut s);
            let mut acc = Vector3::zeros();
            let mut count = 0;
            for l in 1..self.slots.len() {
                if let Some(p) = &self.slots[l].preint {
                    let ui = s.orientations[l - 1] * s.frames[l - 1].lin_vel;
                    let uj = s.orientations[l] * s.frames[l].lin_vel;
                    let corrected = PreintegratedImu {
                        delta_v: p.corrected_delta_v(&s.bias),
                        ..p.clone()
                    };
                    if let Ok(g) = crate::imu::seed_gravity(&ui, &uj, &s.orientations[l - 1], &corrected) {
                        acc += g;
                        count += 1;
                    }
                }
            }
            if count > 0 {
                if let Some(g) = GravityDir::from_vector(&(acc / count as f64)) {
                    self.state.gravity = g;
                    self.gravity_seeded = true;
                }
            }
        }
    }

    fn refresh_orientations(&self, state: &mut WindowState) {
        let n = self.slots.len();
        state.orientations.resize(n, Rotation::identity());
        for l in 0..n {
            state.orientations[l] = if let Some(r) = self.slots[l].anchored {
                r
            } else if l == 0 {
                Rotation::identity()
            } else {
                state.orientations[l - 1] * self.step_rotation(state, l)
            };
        }
    }

    /// Rotation from slot `l − 1` to slot `l`.
    fn step_rotation(&self, state: &WindowState, l: usize) -> Rotation {
        match &self.slots[l].preint {
            Some(p) => p.corrected_delta_r(&state.bias),
            None => {
                let dt = state.frames[l].timestamp - state.frames[l - 1].timestamp;
                so3_exp(&(state.frames[l].ang_vel * dt))
            }
        }
    }

    /// All non-visual residual blocks at `state`.
    pub fn residual_blocks(&self, state: &WindowState) -> Vec<ResidualBlock> {
        let mut out = Vec::new();
        for (l, slot) in self.slots.iter().enumerate() {
            if let Some(w) = &slot.gyro {
                if self.bias_seed.is_some() {
                    out.push(angular_velocity_block(state, l, w, &self.gyro_info));
                }
            }
            if let Some(p) = &slot.preint {
                if l >= 1 && self.gravity_seeded {
                    out.push(delta_v_block(state, l, p, &invert3(&p.cov_delta_v())));
                }
            }
        }
        if let (true, Some(seed)) = (self.bias_factor, &self.bias_seed) {
            out.extend(bias_blocks(state, seed, &self.config.noise));
        }
        if let Some(p) = &self.prior {
            out.push(p.block(state));
        }
        out
    }

    /// Total cost `Σ rᵀ Λ r` at `state` (orientations must be current).
    pub fn cost(&self, state: &WindowState) -> f64 {
        let noise = &self.config.visual_noise;
        let visual: f64 = self
            .slots
            .iter()
            .zip(&state.frames)
            .filter_map(|(slot, f)| slot.visual.as_ref().map(|v| v.information_scale(noise) * v.normal.cost(&f.twist())))
            .sum();
        visual + self.residual_blocks(state).iter().map(ResidualBlock::cost).sum::<f64>()
    }

    /// Cost, Gauss-Newton Hessian `JᵀΛJ` and gradient `JᵀΛr`.
    pub fn linearize(&self, state: &WindowState) -> (f64, DMatrix<f64>, DVector<f64>) {
        let lay = state.layout();
        let mut h = DMatrix::zeros(lay.dim(), lay.dim());
        let mut g = DVector::zeros(lay.dim());
        let mut cost = 0.0;
        for (l, slot) in self.slots.iter().enumerate() {
            if let Some(v) = &slot.visual {
                let s = v.information_scale(&self.config.visual_noise);
                let xi = state.frames[l].twist();
                let o = lay.lin_vel(l);
                let mut hb = h.fixed_view_mut::<6, 6>(o, o);
                hb += v.normal.hessian * s;
                let mut gb = g.fixed_rows_mut::<6>(o);
                gb += (v.normal.hessian * xi - v.normal.rhs) * s;
                cost += s * v.normal.cost(&xi);
            }
        }
        for b in self.residual_blocks(state) {
            cost += b.cost();
            b.accumulate(&mut h, &mut g);
        }
        (cost, h, g)
    }

    /// Levenberg-damped Gauss-Newton over the parameters touched by at
    /// least one factor; untouched parameters keep their values.
    pub fn solve(&mut self) -> Result<SolveReport> {
        let opts = self.config.solver;
        let mut state = self.state.clone();
        self.refresh_orientations(&mut state);
        let (mut cost, mut h, mut g) = self.linearize(&state);
        let active: Vec<usize> = (0..h.nrows()).filter(|&i| h[(i, i)] > 0.0).collect();
        if active.is_empty() {
            return Err(Error::DegenerateGeometry("no factor constrains the window".into()));
        }
        let initial_cost = cost;
        let mut lambda = opts.initial_lambda;
        let mut escalations = 0;
        let mut trace = Vec::new();
        let mut converged = false;
        let na = active.len();
        for _ in 0..opts.max_iterations {
            let mut ha = DMatrix::from_fn(na, na, |r, c| h[(active[r], active[c])]);
            for i in 0..na {
                ha[(i, i)] += lambda;
            }
            let ga = DVector::from_fn(na, |r, _| g[active[r]]);
            let Some(chol) = ha.cholesky() else {
                lambda *= 10.0;
                escalations += 1;
                if escalations > opts.max_escalations {
                    return Err(Error::DegenerateGeometry("normal equations stay singular under damping".into()));
                }
                continue;
            };
            escalations = 0;
            let da = -chol.solve(&ga);
            let mut delta = DVector::zeros(h.nrows());
            for (k, &i) in active.iter().enumerate() {
                delta[i] = da[k];
            }
            let step_norm = delta.norm();
            let mut cand = state.retract(&delta);
            self.refresh_orientations(&mut cand);
            let cand_cost = self.cost(&cand);
            let accepted = cand_cost.is_finite() && cand_cost <= cost;
            if accepted {
                state = cand;
                cost = cand_cost;
                lambda = (lambda * 0.5).max(1e-12);
                (_, h, g) = self.linearize(&state);
            } else {
                lambda *= 10.0;
            }
            trace.push(IterationRecord {
                cost,
                accepted,
                lambda,
                step_norm,
                gravity_norm: state.gravity.vector().norm(),
            });
            if step_norm < opts.step_tolerance {
                converged = true;
                break;
            }
        }
        let unobservable = weak_directions(&h, &active, opts.condition_limit);
        self.state = state;
        Ok(SolveReport {
            initial_cost,
            final_cost: cost,
            converged,
            trace,
            active,
            unobservable,
        })
    }

    /// Removes slot 0 and every factor touching it.
    fn drop_oldest(&mut self) {
        let delta_r = self.state.orientations.get(1).copied().unwrap_or_else(Rotation::identity);
        self.slots.remove(0);
        self.state.frames.remove(0);
        self.state.orientations.remove(0);
        if let Some(first) = self.slots.first_mut() {
            first.preint = None;
        }
        let (state, _) = slide_reference(&self.state, None, &delta_r);
        self.state = state;
        for s in &mut self.slots {
            if let Some(r) = s.anchored.as_mut() {
                *r = delta_r.inverse() * *r;
            }
        }
    }

    /// Schur-complements slot 0 out of the whole window at the current
    /// estimate, replaces every factor with the resulting prior and moves
    /// the reference frame to the new slot 0.
    pub fn marginalize_oldest(&mut self) -> Result<&MarginalPrior> {
        if self.slots.len() < 2 {
            return Err(Error::InvalidInput("marginalization needs at least two frames".into()));
        }
        let mut state = self.state.clone();
        self.refresh_orientations(&mut state);
        let (_, h, g) = self.linearize(&state);
        if g.norm() > 1e-4 * (1.0 + h.diagonal().amax()) {
            warn!("marginalizing away from the optimum (gradient norm {:.3e})", g.norm());
        }
        let (h_star, regularized) = schur_complement(&h, 6);
        if regularized {
            warn!("marginalized block regularized");
        }
        let delta_r = state.orientations[1];
        let mut kept = state.clone();
        kept.frames.remove(0);
        kept.orientations.remove(0);
        let prior = MarginalPrior {
            h_star,
            x_beta: kept.clone(),
            reference_timestamp: kept.frames[0].timestamp,
            regularized,
        };
        let (kept, prior) = slide_reference(&kept, Some(&prior), &delta_r);
        self.slots.remove(0);
        for (s, r) in self.slots.iter_mut().zip(&kept.orientations) {
            s.visual = None;
            s.preint = None;
            s.gyro = None;
            s.anchored = Some(*r);
        }
        self.bias_factor = false;
        self.state = kept;
        self.prior = prior;
        Ok(self.prior.as_ref().expect("prior just set"))
    }
}

/// Directions of the Jacobi-scaled active Hessian whose eigenvalues fall
/// below `max / condition_limit`, mapped back to the full parameter vector.
fn weak_directions(h: &DMatrix<f64>, active: &[usize], condition_limit: f64) -> Vec<DVector<f64>> {
    let na = active.len();
    let scale: Vec<f64> = active.iter().map(|&i| 1.0 / h[(i, i)].sqrt()).collect();
    let hs = DMatrix::from_fn(na, na, |r, c| h[(active[r], active[c])] * scale[r] * scale[c]);
    let eig = hs.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let mut out = Vec::new();
    for k in 0..na {
        if eig.eigenvalues[k] < max / condition_limit {
            let mut dir = DVector::zeros(h.nrows());
            for (r, &i) in active.iter().enumerate() {
                dir[i] = eig.eigenvectors[(r, k)] * scale[r];
            }
            let n = dir.norm();
            if n > 0.0 {
                out.push(dir / n);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::so3_log;
    use crate::imu::preintegrate;
    use crate::imu::ImuSample;
    use nalgebra::{Matrix6, Vector2, Vector6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> WindowState {
        WindowState {
            frames: (0..n)
                .map(|l| FrameState {
                    timestamp: l as f64 / 30.0,
                    lin_vel: Vector3::from_fn(|_, _| rng.random_range(-30.0..30.0)),
                    ang_vel: Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
                })
                .collect(),
            gravity: GravityDir::from_vector(&Vector3::new(rng.random_range(-1.0..1.0), 1.0, rng.random_range(-1.0..1.0))).unwrap(),
            bias: ImuBias::new(Vector3::from_fn(|_, _| rng.random_range(-0.01..0.01)), Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0))),
            orientations: (0..n)
                .map(|l| if l == 0 { Rotation::identity() } else { so3_exp(&Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1))) })
                .collect(),
        }
    }

    fn random_preint(rng: &mut ChaCha8Rng) -> PreintegratedImu {
        let samples: Vec<ImuSample> = (0..8)
            .map(|k| {
                ImuSample::new(
                    k as f64 * 0.005,
                    Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                    Vector3::new(0.0, -981.0, 0.0) + Vector3::from_fn(|_, _| rng.random_range(-100.0..100.0)),
                )
            })
            .collect();
        preintegrate(&samples, &ImuBias::zero(), &ImuNoiseParams::default()).unwrap()
    }

    // Central differences of a block's residual through WindowState::retract.
    fn check_jacobian(state: &WindowState, f: impl Fn(&WindowState) -> ResidualBlock) {
        let eps = 1e-6;
        let block = f(state);
        let d = state.dim();
        for c in 0..d {
            let mut e = DVector::zeros(d);
            e[c] = eps;
            let plus = f(&state.retract(&e)).residual;
            let minus = f(&state.retract(&-e)).residual;
            let fd = (plus - minus) / (2.0 * eps);
            let an = block.jacobian.column(c);
            let scale = fd.amax().max(an.amax()).max(1.0);
            assert!((fd - an).amax() / scale < 1e-4, "column {c} of {:?}", block.kind);
        }
    }

    #[test]
    fn layout_dimensions() {
        assert_eq!(Layout::new(2).dim(), 20);
        assert_eq!(Layout::new(5).dim(), 38);
        let l = Layout::new(3);
        assert_eq!((l.gravity(), l.bias_gyro(), l.bias_accel()), (18, 20, 23));
    }

    #[test]
    fn visual_block_is_scattered_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sys = FlowLinearSystem {
            coeff: (0..30).map(|_| Vector6::from_fn(|_, _| rng.random_range(-2.0..2.0))).collect(),
            rhs: (0..30).map(|_| rng.random_range(-2.0..2.0)).collect(),
            weights: (0..30).map(|_| rng.random_range(0.1..1.0)).collect(),
            pixel_index: vec![(0, 0); 30],
        };
        let state = random_state(&mut rng, 3);
        let lay = state.layout();
        let b = build_visual_block(&sys, 2, &lay, &state).unwrap();
        for c in 0..lay.dim() {
            if !(12..18).contains(&c) {
                assert!(b.jacobian.column(c).iter().all(|&x| x == 0.0));
            }
        }
        check_jacobian(&state, |s| build_visual_block(&sys, 2, &lay, s).unwrap());
        assert!(build_visual_block(&FlowLinearSystem::default(), 1, &lay, &state).is_none());
    }

    #[test]
    fn inertial_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = ImuNoiseParams::default();
        for _ in 0..5 {
            let state = random_state(&mut rng, 3);
            let p = random_preint(&mut rng);
            let info = invert3(&p.cov_delta_v());
            check_jacobian(&state, |s| delta_v_block(s, 2, &p, &info));
            let w = Vector3::new(0.1, -0.2, 0.3);
            check_jacobian(&state, |s| angular_velocity_block(s, 1, &w, &invert3(&noise.gyro_cov)));
            let seed = ImuBias::new(Vector3::new(0.001, 0.0, 0.0), Vector3::new(1.0, 2.0, 3.0));
            check_jacobian(&state, |s| bias_blocks(s, &seed, &noise)[0].clone());
            check_jacobian(&state, |s| bias_blocks(s, &seed, &noise)[1].clone());
        }
    }

    #[test]
    fn prior_jacobian_and_zero_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let beta = random_state(&mut rng, 2);
        let a = DMatrix::from_fn(20, 20, |_, _| rng.random_range(-1.0..1.0));
        let prior = MarginalPrior {
            h_star: &a * a.transpose(),
            x_beta: beta.clone(),
            reference_timestamp: 0.0,
            regularized: false,
        };
        let mut state = random_state(&mut rng, 3);
        state.gravity = beta.gravity.retract(&Vector2::new(0.2, -0.1));
        check_jacobian(&state, |s| prior.block(s));
        let mut at_beta = beta.clone();
        at_beta.frames.push(state.frames[2]);
        at_beta.orientations.push(Rotation::identity());
        assert_eq!(prior.block(&at_beta).cost(), 0.0);
    }

    #[test]
    fn bias_residual_zero_at_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = random_state(&mut rng, 2);
        let blocks = bias_blocks(&state, &state.bias, &ImuNoiseParams::default());
        assert!(blocks.iter().all(|b| b.residual.norm() == 0.0));
    }

    #[test]
    fn schur_examples() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (s, reg) = schur_complement(&h, 1);
        assert!((s[(0, 0)] - 1.5).abs() < 1e-15);
        assert!(!reg);
        let mut blk = DMatrix::zeros(8, 8);
        for i in 0..8 {
            blk[(i, i)] = 1.0 + i as f64;
        }
        let (s, _) = schur_complement(&blk, 6);
        assert_eq!(s, blk.view((6, 6), (2, 2)).into_owned());
        let (_, reg) = schur_complement(&DMatrix::zeros(8, 8), 6);
        assert!(reg);
    }

    #[test]
    fn slide_identity_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = random_state(&mut rng, 3);
        let a = DMatrix::from_fn(26, 26, |_, _| rng.random_range(-1.0..1.0));
        let prior = MarginalPrior {
            h_star: &a * a.transpose(),
            x_beta: state.clone(),
            reference_timestamp: 0.0,
            regularized: false,
        };
        let (s, p) = slide_reference(&state, Some(&prior), &Rotation::identity());
        assert_eq!(s.gravity, state.gravity);
        assert!((p.unwrap().h_star - &prior.h_star).amax() < 1e-12);
    }

    #[test]
    fn slide_quarter_yaw_permutes_gravity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut state = random_state(&mut rng, 2);
        state.gravity = GravityDir::from_vector(&Vector3::new(0.6, 0.0, 0.8)).unwrap();
        let a = DMatrix::from_fn(20, 20, |_, _| rng.random_range(-1.0..1.0));
        let prior = MarginalPrior {
            h_star: &a * a.transpose(),
            x_beta: state.clone(),
            reference_timestamp: 0.0,
            regularized: false,
        };
        // Yaw about the (downward) y axis by 90°.
        let yaw = so3_exp(&Vector3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0));
        let (s, p) = slide_reference(&state, Some(&prior), &yaw);
        let want = Vector3::new(-0.8, 0.0, 0.6);
        assert!((s.gravity.direction() - want).norm() < 1e-9);
        let e0 = prior.h_star.clone().symmetric_eigenvalues();
        let e1 = p.unwrap().h_star.symmetric_eigenvalues();
        let mut a0: Vec<f64> = e0.iter().copied().collect();
        let mut a1: Vec<f64> = e1.iter().copied().collect();
        a0.sort_by(f64::total_cmp);
        a1.sort_by(f64::total_cmp);
        for (x, y) in a0.iter().zip(&a1) {
            assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }

    fn static_factor() -> VisualFactor {
        let mut h = Matrix6::identity() * 50.0;
        h[(0, 1)] = 3.0;
        h[(1, 0)] = 3.0;
        VisualFactor {
            normal: NormalEquations {
                hessian: h,
                rhs: Vector6::zeros(),
                rhs_sq: 0.0,
            },
            twist: Twist::zeros(),
            unobservable: Vec::new(),
            residual_variance: 1.0,
        }
    }

    #[test]
    fn static_pair_without_imu_solves_to_zero() {
        let mut est = Estimator::new(EstimatorConfig {
            window: 2,
            ..EstimatorConfig::default()
        })
        .unwrap();
        est.add_frame(FrameInput::new(0.0)).unwrap();
        let mut f = FrameInput::new(0.1);
        f.visual = Some(static_factor());
        est.add_frame(f).unwrap();
        assert_eq!(est.dim(), 20);
        let mut s = est.state().clone();
        s.frames[1].lin_vel = Vector3::new(3.0, -1.0, 2.0);
        est.set_state(s).unwrap();
        let rep = est.solve().unwrap();
        assert!(est.state().frames[1].twist().norm() < 1e-9);
        assert_eq!(rep.active, (6..12).collect::<Vec<_>>());
        assert!(!rep.is_degenerate());
    }

    #[test]
    fn add_frame_dimensions_and_ordering() {
        let mut est = Estimator::new(EstimatorConfig {
            window: 5,
            ..EstimatorConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in 0..5 {
            let mut f = FrameInput::new(k as f64 * 0.033);
            if k > 0 {
                f.visual = Some(static_factor());
                if k != 2 {
                    f.preint = Some(random_preint(&mut rng));
                }
            }
            f.gyro = Some(Vector3::zeros());
            est.add_frame(f).unwrap();
            assert_eq!(est.dim(), 6 * (k + 1) + 8);
        }
        assert!(matches!(est.add_frame(FrameInput::new(0.1)), Err(Error::NonMonotonic { .. })));
    }

    #[test]
    fn marginalization_keeps_dimension_and_rotates_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut est = Estimator::new(EstimatorConfig {
            window: 3,
            marginalize: true,
            ..EstimatorConfig::default()
        })
        .unwrap();
        for k in 0..6 {
            let mut f = FrameInput::new(k as f64 * 0.033);
            if k > 0 {
                f.visual = Some(static_factor());
                f.preint = Some(random_preint(&mut rng));
            }
            f.gyro = Some(Vector3::new(0.01, 0.0, 0.0));
            est.add_frame(f).unwrap();
            if k == 0 {
                assert!(matches!(est.solve(), Err(Error::DegenerateGeometry(_))));
                continue;
            }
            est.solve().unwrap();
            assert!(est.len() <= 3);
            assert_eq!(est.dim(), 6 * est.len() + 8);
            let g = est.state().gravity.vector().norm();
            assert!((g - 981.0).abs() < 1e-9);
        }
        let p = est.prior().unwrap();
        assert_eq!(p.h_star.nrows(), 20);
        let asym = (&p.h_star - p.h_star.transpose()).amax();
        assert!(asym < 1e-9 * p.h_star.amax());
        assert!(so3_log(&est.state().orientations[0]).norm() < 1e-12);
    }
}
