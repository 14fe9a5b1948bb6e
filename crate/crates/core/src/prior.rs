//! White-noise-on-acceleration motion prior between consecutive frames.
//!
//! The state per frame is a pose `T` (world-to-body) and a body-frame
//! velocity twist `w`. Between frames `prev` and `next` separated by `dt`,
//! the prior error is
//!
//! ```text
//! e = [ xi - dt * w_prev ]        xi = log(T_next * T_prev^-1)
//!     [ Jinv(xi) w_next - w_prev ]
//! ```
//!
//! which is exactly zero on constant-velocity motion. Its covariance is the
//! standard integrated white-noise kernel with power spectral density `Qc`.

use nalgebra::{Matrix6, SMatrix, SVector, Vector6};
use thiserror::Error;

use crate::lie::{
    ad, exp_map, left_jacobian_inv, left_jacobian_inv_apply_jacobian, log_map, LieError, Pose,
    Twist,
};

pub type Vector12 = SVector<f64, 12>;
pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Matrix12x6 = SMatrix<f64, 12, 6>;

#[derive(Debug, Error, PartialEq)]
pub enum PriorError {
    #[error("time step must be positive, got {0}")]
    InvalidTimestep(f64),
    #[error("power spectral density diagonal must be positive, got entry {0}")]
    InvalidSpectralDensity(f64),
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// Jacobians of the 12-dim prior error with respect to left perturbations
/// of each pose and additive perturbations of each velocity.
#[derive(Debug, Clone)]
pub struct PriorJacobians {
    pub prev_pose: Matrix12x6,
    pub prev_vel: Matrix12x6,
    pub next_pose: Matrix12x6,
    pub next_vel: Matrix12x6,
}

/// Constant-velocity (white-noise-on-acceleration) prior with diagonal
/// power spectral density.
#[derive(Debug, Clone)]
pub struct MotionPrior {
    qc_diag: Vector6<f64>,
}

impl Default for MotionPrior {
    /// Unit translational PSD, 0.1 on the rotational axes.
    fn default() -> Self {
        MotionPrior {
            qc_diag: Vector6::new(1.0, 1.0, 1.0, 0.1, 0.1, 0.1),
        }
    }
}

impl MotionPrior {
    pub fn new(qc_diag: Vector6<f64>) -> Result<Self, PriorError> {
        for i in 0..6 {
            if qc_diag[i] <= 0.0 {
                return Err(PriorError::InvalidSpectralDensity(qc_diag[i]));
            }
        }
        Ok(MotionPrior { qc_diag })
    }

    pub fn qc_diag(&self) -> &Vector6<f64> {
        &self.qc_diag
    }

    /// Process-noise covariance over a step of length `dt`:
    /// `[[dt^3/3 Qc, dt^2/2 Qc], [dt^2/2 Qc, dt Qc]]`.
    pub fn process_noise(&self, dt: f64) -> Result<Matrix12, PriorError> {
        if dt <= 0.0 {
            return Err(PriorError::InvalidTimestep(dt));
        }
        let qc = Matrix6::from_diagonal(&self.qc_diag);
        let mut q = Matrix12::zeros();
        q.fixed_view_mut::<6, 6>(0, 0)
            .copy_from(&(qc * (dt * dt * dt / 3.0)));
        q.fixed_view_mut::<6, 6>(0, 6)
            .copy_from(&(qc * (dt * dt / 2.0)));
        q.fixed_view_mut::<6, 6>(6, 0)
            .copy_from(&(qc * (dt * dt / 2.0)));
        q.fixed_view_mut::<6, 6>(6, 6).copy_from(&(qc * dt));
        Ok(q)
    }

    /// Closed-form inverse of [`process_noise`](Self::process_noise):
    /// `[[12/dt^3 Qc^-1, -6/dt^2 Qc^-1], [-6/dt^2 Qc^-1, 4/dt Qc^-1]]`.
    pub fn process_noise_inv(&self, dt: f64) -> Result<Matrix12, PriorError> {
        if dt <= 0.0 {
            return Err(PriorError::InvalidTimestep(dt));
        }
        let qc_inv = Matrix6::from_diagonal(&self.qc_diag.map(|x| 1.0 / x));
        let mut q = Matrix12::zeros();
        q.fixed_view_mut::<6, 6>(0, 0)
            .copy_from(&(qc_inv * (12.0 / (dt * dt * dt))));
        q.fixed_view_mut::<6, 6>(0, 6)
            .copy_from(&(qc_inv * (-6.0 / (dt * dt))));
        q.fixed_view_mut::<6, 6>(6, 0)
            .copy_from(&(qc_inv * (-6.0 / (dt * dt))));
        q.fixed_view_mut::<6, 6>(6, 6).copy_from(&(qc_inv * (4.0 / dt)));
        Ok(q)
    }
}

/// Prior error between two (pose, velocity) states.
pub fn prior_error(
    prev_pose: &Pose,
    prev_vel: &Twist,
    next_pose: &Pose,
    next_vel: &Twist,
    dt: f64,
) -> Result<Vector12, PriorError> {
    if dt <= 0.0 {
        return Err(PriorError::InvalidTimestep(dt));
    }
    let xi = log_map(&next_pose.compose(&prev_pose.inverse()))?;
    let e_pose = xi.vector() - dt * prev_vel.vector();
    let e_vel = left_jacobian_inv(&xi) * next_vel.vector() - prev_vel.vector();
    let mut e = Vector12::zeros();
    e.fixed_rows_mut::<6>(0).copy_from(&e_pose);
    e.fixed_rows_mut::<6>(6).copy_from(&e_vel);
    Ok(e)
}

/// Prior error together with its analytic Jacobians.
///
/// Pose Jacobians are with respect to left perturbations
/// `T <- exp(d^) T`; velocity Jacobians are plain additive.
pub fn prior_error_and_jacobians(
    prev_pose: &Pose,
    prev_vel: &Twist,
    next_pose: &Pose,
    next_vel: &Twist,
    dt: f64,
) -> Result<(Vector12, PriorJacobians), PriorError> {
    if dt <= 0.0 {
        return Err(PriorError::InvalidTimestep(dt));
    }
    let rel = next_pose.compose(&prev_pose.inverse());
    let xi = log_map(&rel)?;
    let jinv = left_jacobian_inv(&xi);

    let e_pose = xi.vector() - dt * prev_vel.vector();
    let e_vel = jinv * next_vel.vector() - prev_vel.vector();
    let mut e = Vector12::zeros();
    e.fixed_rows_mut::<6>(0).copy_from(&e_pose);
    e.fixed_rows_mut::<6>(6).copy_from(&e_vel);

    // d(xi)/d(next pose) = Jinv(xi); d(xi)/d(prev pose) = -Jinv(xi) Ad(exp xi)
    // (the right-Jacobian inverse via J_r^-1 = J_l^-1 Ad(exp)).
    let dxi_dnext = jinv;
    let dxi_dprev = -jinv * exp_map(&xi).adjoint();
    // Sensitivity of Jinv(xi) w_next to xi, by term-wise differentiation of
    // the Bernoulli series.
    let m = left_jacobian_inv_apply_jacobian(&xi, next_vel.vector());

    let mut prev_pose_jac = Matrix12x6::zeros();
    prev_pose_jac.fixed_view_mut::<6, 6>(0, 0).copy_from(&dxi_dprev);
    prev_pose_jac
        .fixed_view_mut::<6, 6>(6, 0)
        .copy_from(&(m * dxi_dprev));

    let mut prev_vel_jac = Matrix12x6::zeros();
    prev_vel_jac
        .fixed_view_mut::<6, 6>(0, 0)
        .copy_from(&(-dt * Matrix6::identity()));
    prev_vel_jac
        .fixed_view_mut::<6, 6>(6, 0)
        .copy_from(&(-Matrix6::identity()));

    let mut next_pose_jac = Matrix12x6::zeros();
    next_pose_jac.fixed_view_mut::<6, 6>(0, 0).copy_from(&dxi_dnext);
    next_pose_jac
        .fixed_view_mut::<6, 6>(6, 0)
        .copy_from(&(m * dxi_dnext));

    let mut next_vel_jac = Matrix12x6::zeros();
    next_vel_jac.fixed_view_mut::<6, 6>(6, 0).copy_from(&jinv);

    Ok((
        e,
        PriorJacobians {
            prev_pose: prev_pose_jac,
            prev_vel: prev_vel_jac,
            next_pose: next_pose_jac,
            next_vel: next_vel_jac,
        },
    ))
}

/// Samples the next (pose, velocity) state by integrating the prior with
/// injected process noise `e ~ N(0, Q_k)`:
/// `xi = dt*w + e_1`, `T_next = exp(xi) T_prev`,
/// `w_next = J(xi)^-1-consistent propagation of (w + e_2)`.
pub fn propagate(
    prev_pose: &Pose,
    prev_vel: &Twist,
    dt: f64,
    noise: &Vector12,
) -> Result<(Pose, Twist), PriorError> {
    if dt <= 0.0 {
        return Err(PriorError::InvalidTimestep(dt));
    }
    let xi = Twist::from_vector(dt * prev_vel.vector() + noise.fixed_rows::<6>(0).into_owned());
    let next_pose = exp_map(&xi).compose(prev_pose);
    // Choose w_next so the velocity residual equals the injected noise:
    // Jinv(xi) w_next - w_prev = e_2  =>  w_next = J(xi)(w_prev + e_2).
    let jl = crate::lie::left_jacobian(&xi);
    let next_vel = Twist::from_vector(
        jl * (prev_vel.vector() + noise.fixed_rows::<6>(6).into_owned()),
    );
    Ok((next_pose, next_vel))
}

/// Convenience check that `|ad(xi)|` stays within the Bernoulli series'
/// radius of convergence; callers treat larger twists as divergence.
pub fn within_series_radius(xi: &Twist) -> bool {
    ad(xi).norm() < 4.0
}
