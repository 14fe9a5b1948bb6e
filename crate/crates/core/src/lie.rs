//! SE(3)/se(3) algebra: wedge/vee operators, exponential and logarithm maps,
//! adjoints, and the left Jacobian family used by the motion prior.
//!
//! Twist ordering is (linear; angular) throughout, i.e. a twist is
//! `[u; v]` with `u` the translational part and `v` the rotational part,
//! and `wedge([u; v]) = [[v^, u], [0, 0]]`.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector4, Vector6};
use thiserror::Error;

/// Angular norm below which closed-form exp/log coefficients switch to
/// their Taylor series.
const SMALL_ANGLE: f64 = 1e-7;

/// Rotation angles closer to pi than this are rejected by [`log_map`].
const NEAR_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LieError {
    /// The rotation angle is within the ill-conditioned neighborhood of pi.
    #[error("rotation angle {angle} is within {margin} of pi; logarithm is ill-conditioned")]
    AngleNearPi { angle: f64, margin: f64 },
    /// A matrix failed the homogeneous-transform invariants.
    #[error("matrix is not a valid SE(3) element: {0}")]
    InvalidPose(String),
}

/// A rigid transform in SE(3), stored as a 4x4 homogeneous matrix.
///
/// The rotation block is kept orthonormal and the bottom row is exactly
/// `[0 0 0 1]`; constructors that accept arbitrary data validate this.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    matrix: Matrix4<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            matrix: Matrix4::identity(),
        }
    }

    /// Builds a pose from an arbitrary 4x4 matrix, checking the SE(3)
    /// invariants (orthonormal rotation, positive determinant, exact
    /// `[0 0 0 1]` bottom row up to 1e-9).
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self, LieError> {
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        if ortho >= 1e-9 {
            return Err(LieError::InvalidPose(format!(
                "rotation block is not orthonormal (|R'R - I| = {ortho:.3e})"
            )));
        }
        if r.determinant() <= 0.0 {
            return Err(LieError::InvalidPose("rotation block has det <= 0".into()));
        }
        let bottom_ok = m[(3, 0)] == 0.0 && m[(3, 1)] == 0.0 && m[(3, 2)] == 0.0 && m[(3, 3)] == 1.0;
        if !bottom_ok {
            return Err(LieError::InvalidPose("bottom row is not [0 0 0 1]".into()));
        }
        Ok(Pose { matrix: m })
    }

    /// Assembles from rotation and translation blocks without validation;
    /// internal callers guarantee `r` orthonormal.
    pub(crate) fn from_parts(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose { matrix: m }
    }

    /// Planar transform: translation (x, y, 0) and yaw about +z.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Pose::from_parts(r, Vector3::new(x, y, 0.0))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Yaw of the rotation block (meaningful for planar poses).
    pub fn yaw(&self) -> f64 {
        self.matrix[(1, 0)].atan2(self.matrix[(0, 0)])
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation().transpose();
        let t = -r * self.translation();
        Pose::from_parts(r, t)
    }

    /// Composition `self * other`, assembled block-wise so the bottom row
    /// stays exact.
    pub fn compose(&self, other: &Pose) -> Pose {
        let r = self.rotation() * other.rotation();
        let t = self.rotation() * other.translation() + self.translation();
        Pose::from_parts(r, t)
    }

    /// Adjoint matrix mapping twists between frames, in (linear; angular)
    /// block order: `[[R, t^ R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation();
        let tr = wedge3(&self.translation()) * r;
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }
}

impl std::ops::Mul for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// An element of se(3): 6-vector `[u; v]` with linear part `u` and angular
/// part `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    vector: Vector6<f64>,
}

impl Twist {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&linear);
        v.fixed_rows_mut::<3>(3).copy_from(&angular);
        Twist { vector: v }
    }

    pub fn from_vector(vector: Vector6<f64>) -> Self {
        Twist { vector }
    }

    pub fn zero() -> Self {
        Twist {
            vector: Vector6::zeros(),
        }
    }

    pub fn vector(&self) -> &Vector6<f64> {
        &self.vector
    }

    pub fn linear(&self) -> Vector3<f64> {
        self.vector.fixed_rows::<3>(0).into_owned()
    }

    pub fn angular(&self) -> Vector3<f64> {
        self.vector.fixed_rows::<3>(3).into_owned()
    }

    pub fn scaled(&self, s: f64) -> Twist {
        Twist {
            vector: self.vector * s,
        }
    }

    pub fn norm(&self) -> f64 {
        self.vector.norm()
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist {
            vector: self.vector + rhs.vector,
        }
    }
}

impl std::ops::Sub for Twist {
    type Output = Twist;
    fn sub(self, rhs: Twist) -> Twist {
        Twist {
            vector: self.vector - rhs.vector,
        }
    }
}

/// Skew-symmetric matrix of a 3-vector.
pub fn wedge3(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// se(3) wedge: maps `[u; v]` to `[[v^, u], [0, 0]]`.
pub fn wedge(t: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&wedge3(&t.angular()));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.linear());
    m
}

/// The adjoint operator of se(3) ("curly wedge"): `[[v^, u^], [0, v^]]`.
pub fn ad(t: &Twist) -> Matrix6<f64> {
    let u = wedge3(&t.linear());
    let v = wedge3(&t.angular());
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&v);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&u);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&v);
    m
}

// Coefficient helpers. Each is multiplied by powers of the angle in the
// maps below, which keeps the closed forms accurate down to the series
// switch point.

/// sin(t)/t
fn coeff_a(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 - t2 / 6.0 + t2 * t2 / 120.0
    } else {
        theta.sin() / theta
    }
}

/// (1 - cos(t))/t^2
fn coeff_b(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        0.5 - t2 / 24.0 + t2 * t2 / 720.0
    } else {
        (1.0 - theta.cos()) / (theta * theta)
    }
}

/// (t - sin(t))/t^3
fn coeff_c(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / (theta * theta * theta)
    }
}

/// 1/t^2 - (1 + cos(t)) / (2 t sin(t))
fn coeff_d(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    }
}

/// (1 - t^2/2 - cos(t))/t^4; cancellation-prone, series below 1e-2.
fn coeff_e(theta: f64) -> f64 {
    if theta < 1e-2 {
        let t2 = theta * theta;
        -1.0 / 24.0 + t2 / 720.0 - t2 * t2 / 40320.0
    } else {
        let t2 = theta * theta;
        (1.0 - t2 / 2.0 - theta.cos()) / (t2 * t2)
    }
}

/// (t - sin(t) - t^3/6)/t^5; cancellation-prone, series below 1e-2.
fn coeff_f(theta: f64) -> f64 {
    if theta < 1e-2 {
        let t2 = theta * theta;
        -1.0 / 120.0 + t2 / 5040.0 - t2 * t2 / 362880.0
    } else {
        let t3 = theta * theta * theta;
        (theta - theta.sin() - t3 / 6.0) / (t3 * theta * theta)
    }
}

/// SO(3) exponential (Rodrigues).
pub fn so3_exp(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let vx = wedge3(v);
    Matrix3::identity() + coeff_a(theta) * vx + coeff_b(theta) * (vx * vx)
}

/// SO(3) logarithm. Errors when the angle is within [`NEAR_PI_MARGIN`] of pi.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, LieError> {
    let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta > std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(LieError::AngleNearPi {
            angle: theta,
            margin: NEAR_PI_MARGIN,
        });
    }
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    // skew = 2 sin(theta) * axis; divide by 2 sinc(theta) to get theta*axis.
    Ok(skew / (2.0 * coeff_a(theta)))
}

/// SO(3) left Jacobian.
pub fn so3_left_jacobian(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let vx = wedge3(v);
    Matrix3::identity() + coeff_b(theta) * vx + coeff_c(theta) * (vx * vx)
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let vx = wedge3(v);
    Matrix3::identity() - 0.5 * vx + coeff_d(theta) * (vx * vx)
}

/// SE(3) exponential map.
pub fn exp_map(t: &Twist) -> Pose {
    let v = t.angular();
    let r = so3_exp(&v);
    let trans = so3_left_jacobian(&v) * t.linear();
    Pose::from_parts(r, trans)
}

/// SE(3) logarithm map. Errors with [`LieError::AngleNearPi`] when the
/// rotation angle is within 1e-6 of pi.
pub fn log_map(p: &Pose) -> Result<Twist, LieError> {
    let v = so3_log(&p.rotation())?;
    let u = so3_left_jacobian_inv(&v) * p.translation();
    Ok(Twist::new(u, v))
}

/// Applies a pose to a homogeneous point; the fourth component is
/// preserved exactly.
pub fn transform_point(p: &Pose, hp: &Vector4<f64>) -> Vector4<f64> {
    p.matrix * hp
}

/// The Q block of the SE(3) left Jacobian (Barfoot's closed form) for
/// twist `[u; v]`.
fn se3_jacobian_q(u: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let ux = wedge3(u);
    let vx = wedge3(v);
    let c1 = coeff_c(theta);
    let c2 = coeff_e(theta);
    let c3 = 0.5 * (c2 - 3.0 * coeff_f(theta));
    let vu = vx * ux;
    let uv = ux * vx;
    let vuv = vu * vx;
    0.5 * ux
        + c1 * (vu + uv + vuv)
        - c2 * (vx * vu + uv * vx - 3.0 * vuv)
        - c3 * (vuv * vx + vx * vuv)
}

/// SE(3) left Jacobian in (linear; angular) block order:
/// `[[J, Q], [0, J]]` with `J` the SO(3) left Jacobian.
pub fn left_jacobian(t: &Twist) -> Matrix6<f64> {
    let u = t.linear();
    let v = t.angular();
    let j = so3_left_jacobian(&v);
    let q = se3_jacobian_q(&u, &v);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m
}

/// Inverse of the SE(3) left Jacobian: `[[J^-1, -J^-1 Q J^-1], [0, J^-1]]`.
pub fn left_jacobian_inv(t: &Twist) -> Matrix6<f64> {
    let u = t.linear();
    let v = t.angular();
    let jinv = so3_left_jacobian_inv(&v);
    let q = se3_jacobian_q(&u, &v);
    let upper = -jinv * q * jinv;
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&upper);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    m
}

// Bernoulli numbers B_n / n! for the inverse-left-Jacobian series
// J^-1(xi) = sum_n B_n/n! ad(xi)^n. Odd entries beyond n=1 are zero.
const BERNOULLI_OVER_FACTORIAL: [f64; 21] = [
    1.0,
    -0.5,
    1.0 / 12.0,                    // B2/2!
    0.0,
    -1.0 / 720.0,                  // B4/4!
    0.0,
    1.0 / 30240.0,                 // B6/6!
    0.0,
    -1.0 / 1209600.0,              // B8/8!
    0.0,
    1.0 / 47900160.0,              // B10/10!
    0.0,
    -691.0 / 1307674368000.0,      // B12/12!
    0.0,
    7.0 / 74724249600.0,           // B14/14!
    0.0,
    -3617.0 / 10670622842880000.0, // B16/16!
    0.0,
    43867.0 / 5109094217170944000.0, // B18/18!
    0.0,
    -174611.0 / 802857662698291200000.0, // B20/20!
];

/// Jacobian of `xi -> left_jacobian_inv(xi) * w` with respect to `xi`,
/// evaluated by term-wise differentiation of the Bernoulli series.
/// Converges for `|ad(xi)| < 2*pi`; prior factors keep `xi` well inside.
pub fn left_jacobian_inv_apply_jacobian(xi: &Twist, w: &Vector6<f64>) -> Matrix6<f64> {
    let a = ad(xi);
    let mut basis_ad = [Matrix6::zeros(); 6];
    for (j, m) in basis_ad.iter_mut().enumerate() {
        let mut e = Vector6::zeros();
        e[j] = 1.0;
        *m = ad(&Twist::from_vector(e));
    }

    let mut result = Matrix6::<f64>::zeros();
    // Running powers: left_pow[k] = A^k w is rebuilt per term; instead keep
    // A^k as matrices since n stays small.
    let mut a_pows: Vec<Matrix6<f64>> = Vec::with_capacity(BERNOULLI_OVER_FACTORIAL.len());
    a_pows.push(Matrix6::identity());
    for n in 1..BERNOULLI_OVER_FACTORIAL.len() {
        let prev = a_pows[n - 1];
        a_pows.push(prev * a);
    }
    for (n, &coeff) in BERNOULLI_OVER_FACTORIAL.iter().enumerate().skip(1) {
        if coeff == 0.0 {
            continue;
        }
        for (j, ej) in basis_ad.iter().enumerate() {
            // d(A^n)/dxi_j = sum_{k=0}^{n-1} A^k E_j A^{n-1-k}
            let mut col = Vector6::zeros();
            for k in 0..n {
                col += a_pows[k] * (ej * (a_pows[n - 1 - k] * w));
            }
            result.column_mut(j).axpy(coeff, &col, 1.0);
        }
    }
    result
}
