//! Rotation and unit-sphere primitives shared by the IMU model, the
//! estimator and the simulator.
//!
//! Units are centimeters, seconds and radians throughout the crate.

use nalgebra::{Matrix3, Matrix3x2, Rotation3, Unit, Vector2, Vector3};

/// Orientation, stored as an orthonormal 3x3 matrix.
pub type Rotation = Rotation3<f64>;

/// Magnitude of gravity in cm/s². Never optimized.
pub const GRAVITY_MAGNITUDE: f64 = 981.0;

/// Below this angle the closed forms switch to their series expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`].
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Exponential map of SO(3) (Rodrigues' formula).
pub fn so3_exp(phi: &Vector3<f64>) -> Rotation {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation::from_matrix_unchecked(Matrix3::identity() + k * a + k * k * b)
}

/// Logarithm map of SO(3); the returned angle lies in `[0, π]`.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let antisym = vee(&(m - m.transpose())) * 0.5;
    if theta < 1e-6 {
        // sin(θ)/θ ≈ 1 - θ²/6
        return antisym * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // R ≈ 2nnᵀ - I near the half turn; read the axis off the symmetric part.
        let sym = (m + Matrix3::identity()) * 0.5;
        let i = (0..3)
            .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
            .unwrap_or(0);
        let mut axis: Vector3<f64> = sym.column(i).into();
        axis /= axis.norm();
        // Resolve the sign with the (tiny) antisymmetric part when it is informative.
        if axis.dot(&antisym) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    antisym * (theta / theta.sin())
}

/// Right Jacobian of SO(3):
/// `exp(φ + δ) ≈ exp(φ) · exp(J_r(φ) δ)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() - k * a + k * k * b
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let b = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + k * 0.5 + k * k * b
}

/// Gravity direction on the unit sphere. The magnitude is the fixed
/// [`GRAVITY_MAGNITUDE`]; only the two tangent degrees of freedom move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravityDir {
    dir: Unit<Vector3<f64>>,
}

impl GravityDir {
    /// Builds a direction from any nonzero vector. Returns `None` for
    /// zero or non-finite input.
    pub fn from_vector(v: &Vector3<f64>) -> Option<Self> {
        if !v.iter().all(|x| x.is_finite()) {
            return None;
        }
        Unit::try_new(*v, 1e-12).map(|dir| Self { dir })
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.dir.into_inner()
    }

    /// Full gravity vector, `981 · direction`.
    pub fn vector(&self) -> Vector3<f64> {
        self.dir.into_inner() * GRAVITY_MAGNITUDE
    }

    /// Orthonormal tangent basis `[b1 b2]` at this direction.
    ///
    /// `b1` is built from the canonical axis least aligned with the
    /// direction (lowest index wins ties), `b2 = g × b1`.
    pub fn tangent_basis(&self) -> Matrix3x2<f64> {
        let g = self.direction();
        let mut axis = 0;
        for i in 1..3 {
            if g[i].abs() < g[axis].abs() {
                axis = i;
            }
        }
        let e = Vector3::ith(axis, 1.0);
        let b1 = g.cross(&e).normalize();
        let b2 = g.cross(&b1);
        Matrix3x2::from_columns(&[b1, b2])
    }

    /// Moves along the sphere: rotates the direction about the tangent
    /// axis `B·delta` by `‖delta‖` radians and re-normalizes.
    pub fn retract(&self, delta: &Vector2<f64>) -> Self {
        let w = self.tangent_basis() * delta;
        let moved = so3_exp(&w) * self.direction();
        Self {
            dir: Unit::new_normalize(moved),
        }
    }

    /// Tangent coordinates of `target` at `self`, the inverse of
    /// [`GravityDir::retract`] along the connecting geodesic.
    pub fn local(&self, target: &GravityDir) -> Vector2<f64> {
        let a = self.direction();
        let b = target.direction();
        let cross = a.cross(&b);
        let sin = cross.norm();
        let cos = a.dot(&b);
        let angle = sin.atan2(cos);
        if sin < 1e-15 {
            // Same point (or antipodal, where the geodesic is not unique).
            return Vector2::zeros();
        }
        self.tangent_basis().transpose() * (cross * (angle / sin))
    }

    /// Derivative of the full gravity vector `981·g` with respect to the
    /// tangent increment at zero.
    pub fn vector_jacobian(&self) -> nalgebra::Matrix3x2<f64> {
        -skew(&self.vector()) * self.tangent_basis()
    }

    /// Expresses the direction in another frame: returns `rot · g`.
    pub fn rotated(&self, rot: &Rotation) -> Self {
        Self {
            dir: Unit::new_normalize(rot * self.direction()),
        }
    }
}

/// Free-function form of [`GravityDir::retract`].
pub fn gravity_retract(g: &GravityDir, delta: &Vector2<f64>) -> GravityDir {
    g.retract(delta)
}

/// The increment that undoes `retract(g, delta)` when expressed in the
/// tangent basis of the retracted point. The rotation axis is invariant
/// under its own rotation, so the reverse step is `-delta` transported
/// into the new basis.
pub fn transport_reverse(g: &GravityDir, delta: &Vector2<f64>) -> Vector2<f64> {
    let moved = g.retract(delta);
    let axis = g.tangent_basis() * delta;
    -(moved.tangent_basis().transpose() * axis)
}

/// Rigid motion after holding the body twist `(v, ω)` for `dt` seconds:
/// returns the pose `(R, t)` of the moved frame in the starting frame.
pub fn integrate_twist(v: &Vector3<f64>, w: &Vector3<f64>, dt: f64) -> (Rotation, Vector3<f64>) {
    let phi = w * dt;
    // Left Jacobian J_l(φ) = J_r(−φ).
    let t = so3_right_jacobian(&-phi) * (v * dt);
    (so3_exp(&phi), t)
}

/// Rigid transform mapping points of a child frame into its parent:
/// `x_parent = rotation · x_child + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self::new(r, -(r * self.translation))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(self.rotation * other.rotation, self.transform(&other.translation))
    }
}

/// A pose with its timestamp in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: Pose,
}
