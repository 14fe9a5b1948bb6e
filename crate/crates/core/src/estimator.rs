//! Sliding-window Gauss-Newton estimator with robust reweighting.
//!
//! A window holds `w` frames of state {pose `T_{k,0}`, body velocity twist}
//! at strictly increasing timestamps. The first pose is the locked
//! reference `τ` and is never perturbed; the remaining poses and all
//! velocities (including the first frame's) are estimated. Measurement
//! factors pair a keypoint `z` in frame `k` against its matched reference
//! point `r` in frame `τ`, with a learned 3×3 information matrix `W`.
//! Motion-prior factors tie consecutive frames to constant-velocity
//! kinematics.
//!
//! Unknown layout: `[vel_0 (6) | pose_1, vel_1 (12) | ... ]`, with pose
//! updates applied left-multiplicatively, `T <- exp(d) * T`.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3, Vector4};
use thiserror::Error;

use crate::lie::{exp_map, LieError, Pose, Twist};
use crate::prior::{
    prior_error, prior_error_and_jacobians, Matrix12, MotionPrior, PriorError, Vector12,
};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("invalid factor: {0}")]
    InvalidFactor(String),
    #[error("cost increased for {0} consecutive iterations; solver diverged")]
    SolverDiverged(usize),
    #[error("normal equations are singular; some state is unconstrained")]
    SingularSystem,
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// One frame of window state.
#[derive(Debug, Clone)]
pub struct Frame {
    pub pose: Pose,
    pub velocity: Twist,
    pub timestamp: f64,
}

/// The sliding window: `w >= 2` frames, first pose locked.
/// `reference_index` records the global sequence index of frame 0 for
/// bookkeeping across slides; the solver itself is index-local.
#[derive(Debug, Clone)]
pub struct WindowState {
    frames: Vec<Frame>,
    pub reference_index: usize,
}

impl WindowState {
    pub fn new(frames: Vec<Frame>, reference_index: usize) -> Result<Self, EstimatorError> {
        if frames.len() < 2 {
            return Err(EstimatorError::InvalidWindow(format!(
                "need at least 2 frames, got {}",
                frames.len()
            )));
        }
        for pair in frames.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(EstimatorError::InvalidWindow(
                    "timestamps must be strictly increasing".into(),
                ));
            }
        }
        Ok(WindowState {
            frames,
            reference_index,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, k: usize) -> &Frame {
        &self.frames[k]
    }

    /// Constant-velocity extrapolation one step of `dt` past the last frame.
    pub fn extrapolate(&self, dt: f64) -> Frame {
        let last = self.frames.last().expect("window is never empty");
        Frame {
            pose: exp_map(&last.velocity.scaled(dt)).compose(&last.pose),
            velocity: last.velocity,
            timestamp: last.timestamp + dt,
        }
    }

    /// Drops the first frame and appends `frame`, advancing the reference.
    pub fn slide(&mut self, frame: Frame) -> Result<(), EstimatorError> {
        if frame.timestamp <= self.frames.last().unwrap().timestamp {
            return Err(EstimatorError::InvalidWindow(
                "slid-in frame must be later than the window".into(),
            ));
        }
        self.frames.remove(0);
        self.frames.push(frame);
        self.reference_index += 1;
        Ok(())
    }

    fn unknown_dim(&self) -> usize {
        6 + 12 * (self.frames.len() - 1)
    }

    /// Column offset of frame `k`'s velocity block.
    fn vel_col(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            6 + 12 * (k - 1) + 6
        }
    }

    /// Column offset of frame `k`'s pose block (`k >= 1`).
    fn pose_col(&self, k: usize) -> usize {
        debug_assert!(k >= 1, "frame 0 pose is locked");
        6 + 12 * (k - 1)
    }

    fn apply_update(&mut self, delta: &DVector<f64>) {
        let d0 = Twist::from_vector(delta.fixed_rows::<6>(0).into_owned());
        self.frames[0].velocity = self.frames[0].velocity + d0;
        for k in 1..self.frames.len() {
            let dp = Twist::from_vector(
                delta.fixed_rows::<6>(self.pose_col(k)).into_owned(),
            );
            let dv = Twist::from_vector(delta.fixed_rows::<6>(self.vel_col(k)).into_owned());
            self.frames[k].pose = exp_map(&dp).compose(&self.frames[k].pose);
            self.frames[k].velocity = self.frames[k].velocity + dv;
        }
    }
}

/// Projection dropping the homogeneous coordinate of a 4-vector.
fn dehomogenize(v: &Vector4<f64>) -> Vector3<f64> {
    Vector3::new(v.x, v.y, v.z)
}

/// A keypoint `z` in frame `frame` matched to reference point `r` in the
/// locked frame, weighted by the 3×3 information matrix `W`.
#[derive(Debug, Clone)]
pub struct MeasurementFactor {
    pub keypoint: Vector4<f64>,
    pub reference: Vector4<f64>,
    pub weight: Matrix3<f64>,
    pub frame: usize,
}

impl MeasurementFactor {
    pub fn new(
        keypoint: Vector4<f64>,
        reference: Vector4<f64>,
        weight: Matrix3<f64>,
        frame: usize,
    ) -> Result<Self, EstimatorError> {
        if keypoint.w != 1.0 || reference.w != 1.0 {
            return Err(EstimatorError::InvalidFactor(
                "points must be homogeneous with unit last element".into(),
            ));
        }
        if frame == 0 {
            return Err(EstimatorError::InvalidFactor(
                "measurements pair a later frame against the locked reference".into(),
            ));
        }
        if (weight - weight.transpose()).norm() > 1e-9 * weight.norm().max(1.0) {
            return Err(EstimatorError::InvalidFactor(
                "weight matrix must be symmetric".into(),
            ));
        }
        if nalgebra::Cholesky::new(weight).is_none() {
            return Err(EstimatorError::InvalidFactor(
                "weight matrix must be positive definite".into(),
            ));
        }
        Ok(MeasurementFactor {
            keypoint,
            reference,
            weight,
            frame,
        })
    }
}

/// Measurement residual `e = D (z - T_{k,0} T_{0,τ} r)`, where `x_tau` is
/// the locked reference pose `T_{τ,0}` (its inverse is composed on the
/// right) and `x_k` is `T_{k,0}`.
pub fn measurement_error(x_tau: &Pose, x_k: &Pose, f: &MeasurementFactor) -> Vector3<f64> {
    let g = x_k.compose(&x_tau.inverse());
    let p = g.matrix() * f.reference;
    dehomogenize(&(f.keypoint - p))
}

/// Geman-McClure IRLS weight `1/(1+u^2)^2` with squared Mahalanobis norm
/// `u^2 = e' W e`.
pub fn robust_weight(e: &Vector3<f64>, w: &Matrix3<f64>) -> f64 {
    let u2 = (e.transpose() * w * e)[0];
    1.0 / ((1.0 + u2) * (1.0 + u2))
}

/// Geman-McClure cost `rho(u) = u^2 / (2 (1 + u^2))`.
fn robust_cost(u2: f64) -> f64 {
    u2 / (2.0 * (1.0 + u2))
}

/// A motion-prior factor between frames `prev` and `next`, carrying the
/// inverse process-noise covariance for the step.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    pub prev: usize,
    pub next: usize,
    q_inv: Matrix12,
    dt: f64,
}

impl PriorFactor {
    pub fn between(
        motion_prior: &MotionPrior,
        state: &WindowState,
        prev: usize,
        next: usize,
    ) -> Result<Self, EstimatorError> {
        if prev >= next || next >= state.len() {
            return Err(EstimatorError::InvalidFactor(format!(
                "prior factor indices ({prev}, {next}) out of order or range"
            )));
        }
        let dt = state.frame(next).timestamp - state.frame(prev).timestamp;
        Ok(PriorFactor {
            prev,
            next,
            q_inv: motion_prior.process_noise_inv(dt)?,
            dt,
        })
    }

    pub fn q_inv(&self) -> &Matrix12 {
        &self.q_inv
    }

    fn error(&self, state: &WindowState) -> Result<Vector12, PriorError> {
        let p = state.frame(self.prev);
        let n = state.frame(self.next);
        prior_error(&p.pose, &p.velocity, &n.pose, &n.velocity, self.dt)
    }
}

/// Gauss-Newton options. Defaults: at most 20 iterations, stop when the
/// applied update norm falls below 1e-6 (or the gradient is numerically
/// zero), 8 step halvings in the line search, robust reweighting on.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub update_tolerance: f64,
    pub gradient_tolerance: f64,
    pub max_halvings: usize,
    pub robust: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 20,
            update_tolerance: 1e-6,
            gradient_tolerance: 1e-12,
            max_halvings: 8,
            robust: true,
        }
    }
}

/// Posterior mean and Gauss-Newton information matrix over the unknowns,
/// plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: WindowState,
    pub information: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_cost: f64,
}

impl Posterior {
    /// Marginal covariance of frame `k`'s unknowns: 12×12 for `k >= 1`
    /// (pose then velocity), and the 6×6 velocity covariance embedded in
    /// the upper-left for `k = 0`. Materializes only the requested block.
    pub fn marginal_covariance(&self, k: usize) -> Option<DMatrix<f64>> {
        let chol = nalgebra::Cholesky::new(self.information.clone())?;
        let (start, width) = if k == 0 {
            (0usize, 6usize)
        } else {
            (6 + 12 * (k - 1), 12usize)
        };
        let dim = self.information.nrows();
        let mut block = DMatrix::zeros(width, width);
        for j in 0..width {
            let mut e = DVector::zeros(dim);
            e[start + j] = 1.0;
            let col = chol.solve(&e);
            for i in 0..width {
                block[(i, j)] = col[start + i];
            }
        }
        Some(block)
    }
}

struct NormalEquations {
    h: DMatrix<f64>,
    b: DVector<f64>,
}

/// Total cost at a state: quadratic prior terms plus (optionally robust)
/// measurement terms. Returns infinity when the state leaves the domain of
/// the pose logarithm, which makes the line search reject the step.
fn total_cost(
    state: &WindowState,
    priors: &[PriorFactor],
    meas: &[MeasurementFactor],
    robust: bool,
) -> f64 {
    let mut cost = 0.0;
    for pf in priors {
        match pf.error(state) {
            Ok(e) => cost += 0.5 * (e.transpose() * pf.q_inv * e)[0],
            Err(_) => return f64::INFINITY,
        }
    }
    let x_tau = &state.frame(0).pose;
    for mf in meas {
        let e = measurement_error(x_tau, &state.frame(mf.frame).pose, mf);
        let u2 = (e.transpose() * mf.weight * e)[0];
        cost += if robust { robust_cost(u2) } else { 0.5 * u2 };
    }
    cost
}

fn build_normal_equations(
    state: &WindowState,
    priors: &[PriorFactor],
    meas: &[MeasurementFactor],
    robust: bool,
) -> Result<NormalEquations, EstimatorError> {
    let dim = state.unknown_dim();
    let mut h = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);

    for pf in priors {
        let p = state.frame(pf.prev);
        let n = state.frame(pf.next);
        let (e, jac) =
            prior_error_and_jacobians(&p.pose, &p.velocity, &n.pose, &n.velocity, pf.dt)?;

        // (column offset, 12×6 Jacobian block); the locked pose contributes
        // no block.
        let mut blocks: Vec<(usize, SMatrix<f64, 12, 6>)> = Vec::with_capacity(4);
        if pf.prev >= 1 {
            blocks.push((state.pose_col(pf.prev), jac.prev_pose));
        }
        blocks.push((state.vel_col(pf.prev), jac.prev_vel));
        blocks.push((state.pose_col(pf.next), jac.next_pose));
        blocks.push((state.vel_col(pf.next), jac.next_vel));

        let qe = pf.q_inv * e;
        for &(ci, ref ji) in &blocks {
            let jtq = ji.transpose() * pf.q_inv;
            for &(cj, ref jj) in &blocks {
                let hij = jtq * jj;
                for r in 0..6 {
                    for c in 0..6 {
                        h[(ci + r, cj + c)] += hij[(r, c)];
                    }
                }
            }
            let bi = ji.transpose() * qe;
            for r in 0..6 {
                b[ci + r] += bi[r];
            }
        }
    }

    let x_tau = state.frame(0).pose;
    for mf in meas {
        if mf.frame >= state.len() {
            return Err(EstimatorError::InvalidFactor(format!(
                "measurement frame {} outside window of {}",
                mf.frame,
                state.len()
            )));
        }
        let g = state.frame(mf.frame).pose.compose(&x_tau.inverse());
        let p = g.matrix() * mf.reference;
        let e = dehomogenize(&(mf.keypoint - p));
        let w_eff = if robust {
            robust_weight(&e, &mf.weight) * mf.weight
        } else {
            mf.weight
        };
        // e = z - p with left perturbation of T_{k,0}: de/dd = [-I | p^].
        let mut j = SMatrix::<f64, 3, 6>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(-Matrix3::identity()));
        j.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&crate::lie::wedge3(&dehomogenize(&p)));
        let col = state.pose_col(mf.frame);
        let hkk = j.transpose() * w_eff * j;
        let bk = j.transpose() * (w_eff * e);
        for r in 0..6 {
            for c in 0..6 {
                h[(col + r, col + c)] += hkk[(r, c)];
            }
            b[col + r] += bk[r];
        }
    }

    Ok(NormalEquations { h, b })
}

/// Runs robust Gauss-Newton over the window. See the module docs for the
/// state layout; the first pose is returned bit-identical to the input.
pub fn solve_window(
    state: &WindowState,
    priors: &[PriorFactor],
    meas: &[MeasurementFactor],
    opts: &SolverOptions,
) -> Result<Posterior, EstimatorError> {
    let mut current = state.clone();
    let mut cost = total_cost(&current, priors, meas, opts.robust);
    if !cost.is_finite() {
        return Err(EstimatorError::InvalidWindow(
            "initial state has non-finite cost".into(),
        ));
    }

    let mut iterations = 0usize;
    let mut converged = false;
    let mut consecutive_increases = 0usize;

    while iterations < opts.max_iterations {
        iterations += 1;
        let ne = build_normal_equations(&current, priors, meas, opts.robust)?;

        // A numerically zero gradient means the quadratic model is already
        // stationary (e.g. a prior-only window at constant velocity, whose
        // normal matrix is gauge-singular): converge with a zero update.
        if ne.b.amax() < opts.gradient_tolerance {
            converged = true;
            break;
        }

        let chol = nalgebra::Cholesky::new(ne.h.clone()).ok_or(EstimatorError::SingularSystem)?;
        let full_step = -chol.solve(&ne.b);

        // Backtracking line search: halve until the cost stops increasing.
        let mut scale = 1.0;
        let mut halvings = 0;
        let (accepted, accepted_cost) = loop {
            let mut candidate = current.clone();
            let step = &full_step * scale;
            candidate.apply_update(&step);
            let c = total_cost(&candidate, priors, meas, opts.robust);
            if c <= cost || halvings >= opts.max_halvings {
                break (candidate, c);
            }
            scale *= 0.5;
            halvings += 1;
        };

        if accepted_cost > cost {
            consecutive_increases += 1;
            if consecutive_increases >= 5 {
                return Err(EstimatorError::SolverDiverged(consecutive_increases));
            }
        } else {
            consecutive_increases = 0;
        }

        current = accepted;
        cost = accepted_cost;

        if (full_step.norm() * scale) < opts.update_tolerance {
            converged = true;
            break;
        }
    }

    let ne = build_normal_equations(&current, priors, meas, opts.robust)?;
    Ok(Posterior {
        mean: current,
        information: ne.h,
        iterations,
        converged,
        final_cost: cost,
    })
}

/// Decomposition of the variational objective evaluated at the posterior
/// mean: quadratic prior part, measurement part `0.5 e'We - ln|W|` per
/// factor, and the entropy-related `0.5 ln|Sigma^-1|` (None when the
/// information matrix is singular, e.g. prior-only windows).
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub prior: f64,
    pub measurement: f64,
    pub entropy: Option<f64>,
    pub total: f64,
}

/// Variational objective at the posterior mean. The entropy term is
/// constant with respect to the learned frontend and is reported for
/// monitoring but excluded from training gradients.
pub fn esgvi_loss(
    posterior: &Posterior,
    priors: &[PriorFactor],
    meas: &[MeasurementFactor],
) -> LossBreakdown {
    let state = &posterior.mean;
    let mut prior_part = 0.0;
    for pf in priors {
        if let Ok(e) = pf.error(state) {
            prior_part += 0.5 * (e.transpose() * pf.q_inv * e)[0];
        }
    }
    let x_tau = &state.frame(0).pose;
    let mut meas_part = 0.0;
    for mf in meas {
        let e = measurement_error(x_tau, &state.frame(mf.frame).pose, mf);
        meas_part += 0.5 * (e.transpose() * mf.weight * e)[0] - mf.weight.determinant().ln();
    }
    let entropy = nalgebra::Cholesky::new(posterior.information.clone()).map(|chol| {
        let logdet: f64 = (0..posterior.information.nrows())
            .map(|i| chol.l_dirty()[(i, i)].ln())
            .sum();
        logdet // 0.5 * ln|H| with |H| = prod diag(L)^2
    });
    LossBreakdown {
        prior: prior_part,
        measurement: meas_part,
        entropy,
        total: prior_part + meas_part + entropy.unwrap_or(0.0),
    }
}
