//! Unsupervised training loop and sliding-window odometry driver.
//!
//! Training alternates two steps over randomly sampled windows of scans.
//! The estimation step runs the robust sliding-window solver on factors
//! built from the current network's keypoints, soft matches, and learned
//! inverse covariances. The learning step then differentiates the
//! variational objective at the returned posterior mean with respect to
//! the network outputs only — poses are held fixed, the motion prior is
//! constant in the parameters, and factors whose squared Mahalanobis
//! error exceeds a gate contribute exactly zero gradient. No groundtruth
//! enters anywhere: the only training signal is the self-consistency of
//! matched features under the motion prior.
//!
//! The same machinery drives inference: [`run_odometry`] slides a window
//! over a scan sequence one frame at a time, locking the oldest solved
//! pose (which doubles as the matching target for the frames behind it)
//! and emitting one world-frame pose per scan.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix3, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::estimator::{
    esgvi_loss, measurement_error, solve_window, EstimatorError, Frame, MeasurementFactor,
    PriorFactor, SolverOptions, WindowState,
};
use crate::eval::Trajectory;
use crate::features::{
    assemble_weight, assemble_weight_backward, extract_features, extract_keypoints,
    match_backward, match_keypoints, sample_at, sample_at_backward, save_model, to_metric,
    to_metric_backward, FeatureError, FeatureModel, FeatureSet, FrontendConfig, Keypoints,
    MatchSet, OutputAdjoints, Tensor, WeightBlock,
};
use crate::lie::{log_map, Pose, Twist};
use crate::prior::{MotionPrior, PriorError};
use crate::scan::{cell_validity, CartesianImage};

/// Errors of training and odometry.
#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainerError {
    /// True for per-window solver failures that a training loop should
    /// skip (parameters untouched) rather than abort on.
    pub fn is_window_failure(&self) -> bool {
        matches!(
            self,
            TrainerError::Estimator(EstimatorError::SolverDiverged(_))
                | TrainerError::Estimator(EstimatorError::SingularSystem)
        )
    }
}

/// Switches that remove one training mechanism at a time, for measuring
/// how much each contributes to final odometry quality.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Replace the full 2x2 planar inverse covariance with an isotropic
    /// one driven by the first weight score alone.
    pub scalar_weight: bool,
    /// Disable the squared-Mahalanobis gate in the learning step: every
    /// factor backpropagates.
    pub no_mah_gate: bool,
    /// Treat every cell as valid: no sensor-artifact or occupancy masking.
    pub no_masking: bool,
    /// Disable random rotation augmentation.
    pub no_augmentation: bool,
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Frames per training window; at least 2.
    pub window_size: usize,
    /// Adaptive-moment step size. Zero freezes the parameters (useful for
    /// probing gradients without updating).
    pub learning_rate: f64,
    /// Number of optimization steps the driver runs.
    pub max_steps: usize,
    /// Squared-Mahalanobis gate: factors with `e'We` above this threshold
    /// are excluded from the learning-step gradient.
    pub alpha: f64,
    /// Confidence threshold on `log|R|` for inference-time filtering.
    pub eta: f64,
    /// Maximum magnitude of the rotation augmentation, radians.
    pub aug_max_angle: f64,
    /// Seed for window sampling and augmentation.
    pub seed: u64,
    /// Minimum fraction of valid pixels for a cell to yield a keypoint.
    pub min_cell_occupancy: f64,
    /// Fixed stiffness of the out-of-plane weight block.
    pub z_weight: f64,
    /// Motion-prior power spectral density diagonal.
    pub qc_diag: Vector6<f64>,
    /// Checkpoint every this many steps (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window_size: 4,
            learning_rate: 1e-5,
            max_steps: 2000,
            alpha: 16.0,
            eta: 4.0,
            aug_max_angle: 0.26,
            seed: 0,
            min_cell_occupancy: 0.05,
            z_weight: 1e4,
            qc_diag: Vector6::new(1.0, 1.0, 1.0, 0.1, 0.1, 0.1),
            checkpoint_every: 500,
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let fail = |msg: String| Err(TrainerError::InvalidConfig(msg));
        if self.window_size < 2 {
            return fail(format!("window_size must be >= 2, got {}", self.window_size));
        }
        if !(self.alpha > 0.0) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.max_steps == 0 {
            return fail("max_steps must be at least 1".into());
        }
        if !(self.aug_max_angle >= 0.0) {
            return fail(format!(
                "aug_max_angle must be non-negative, got {}",
                self.aug_max_angle
            ));
        }
        if !(0.0..=1.0).contains(&self.min_cell_occupancy) {
            return fail(format!(
                "min_cell_occupancy must lie in [0, 1], got {}",
                self.min_cell_occupancy
            ));
        }
        if !(self.z_weight > 0.0) {
            return fail(format!("z_weight must be positive, got {}", self.z_weight));
        }
        if !self.eta.is_finite() {
            return fail(format!("eta must be finite, got {}", self.eta));
        }
        if self.qc_diag.iter().any(|&q| q < 0.0) {
            return fail("qc_diag entries must be non-negative".into());
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    /// Fresh state with the canonical decay constants.
    pub fn new(n_params: usize) -> Self {
        OptimizerState {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected moment update. A zero learning rate still
    /// advances the moments but leaves the parameters bitwise unchanged.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64], learning_rate: f64) {
        assert_eq!(params.len(), self.first_moment.len(), "parameter count mismatch");
        assert_eq!(grads.len(), self.first_moment.len(), "gradient count mismatch");
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        for ((m, v), &g) in self
            .first_moment
            .iter_mut()
            .zip(self.second_moment.iter_mut())
            .zip(grads.iter())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        if learning_rate == 0.0 {
            return;
        }
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, &m), &v) in params
            .iter_mut()
            .zip(self.first_moment.iter())
            .zip(self.second_moment.iter())
        {
            *p -= learning_rate * (m / c1) / ((v / c2).sqrt() + self.epsilon);
        }
    }
}

/// Rotates an image about its center (the sensor origin) by `angle`
/// radians: content at offset `d` from the center moves to offset
/// `R(angle) d`. Intensities are resampled bilinearly, the validity mask
/// by nearest neighbor; pixels whose source falls outside the image
/// become zero and invalid.
pub fn rotate_image(image: &CartesianImage, angle: f64) -> CartesianImage {
    let s = image.size;
    let half = s as f64 / 2.0;
    let limit = (s - 1) as f64;
    let (sa, ca) = angle.sin_cos();
    let mut pixels = vec![0.0f32; s * s];
    let mut mask = vec![false; s * s];
    for row in 0..s {
        let dy = row as f64 - half;
        for col in 0..s {
            let dx = col as f64 - half;
            // Source coordinate: the inverse rotation of the offset.
            let sx = half + ca * dx + sa * dy;
            let sy = half - sa * dx + ca * dy;
            if !(0.0..=limit).contains(&sx) || !(0.0..=limit).contains(&sy) {
                continue;
            }
            let x0 = (sx.floor() as usize).min(s - 2);
            let y0 = (sy.floor() as usize).min(s - 2);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let at = |r: usize, c: usize| image.pixels[r * s + c] as f64;
            let value = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            let idx = row * s + col;
            pixels[idx] = value as f32;
            let nr = sy.round() as usize;
            let nc = sx.round() as usize;
            mask[idx] = image.mask[nr * s + nc];
        }
    }
    CartesianImage {
        pixels,
        mask,
        size: s,
        resolution: image.resolution,
        timestamp: image.timestamp,
    }
}

/// Draws an angle uniformly from `[-max_angle, max_angle)` and returns the
/// rotated image together with the applied angle, so the corresponding
/// frame's pose initialization can be rotated consistently.
pub fn augment_rotation(
    image: &CartesianImage,
    max_angle: f64,
    rng: &mut impl Rng,
) -> (CartesianImage, f64) {
    assert!(max_angle >= 0.0, "max_angle must be non-negative");
    if max_angle == 0.0 {
        return (image.clone(), 0.0);
    }
    let angle = rng.random_range(-max_angle..max_angle);
    (rotate_image(image, angle), angle)
}

/// Isotropic inverse covariance for the scalar-weight ablation: the whole
/// matrix scales with `exp(d1)`, so the planar block has
/// `log|R| = 2 d1` and the full determinant satisfies
/// `ln|W| = 3 d1 + ln z_stiffness`.
pub fn scalar_weight(d1: f64, z_stiffness: f64) -> WeightBlock {
    assert!(z_stiffness > 0.0, "z stiffness must be positive");
    let e1 = d1.exp();
    let mut matrix = Matrix3::zeros();
    matrix[(0, 0)] = e1;
    matrix[(1, 1)] = e1;
    matrix[(2, 2)] = z_stiffness * e1;
    WeightBlock {
        matrix,
        log_det_r: 2.0 * d1,
    }
}

/// Reverse pass of [`scalar_weight`]: the adjoint of `d1` given adjoints
/// of the matrix and of the full log-determinant `ln|W| = 3 d1 + ln z`.
pub fn scalar_weight_backward(
    d1: f64,
    z_stiffness: f64,
    matrix_adjoint: &Matrix3<f64>,
    log_det_w_adjoint: f64,
) -> f64 {
    let e1 = d1.exp();
    e1 * (matrix_adjoint[(0, 0)]
        + matrix_adjoint[(1, 1)]
        + z_stiffness * matrix_adjoint[(2, 2)])
        + 3.0 * log_det_w_adjoint
}

/// Keeps the keypoints whose planar log-determinant confidence reaches
/// `eta`, preserving the order of survivors.
pub fn inference_filter(features: &FeatureSet, eta: f64) -> FeatureSet {
    let keep: Vec<usize> = (0..features.points.len())
        .filter(|&i| features.log_det_r[i] >= eta)
        .collect();
    FeatureSet {
        points: keep.iter().map(|&i| features.points[i]).collect(),
        weights: keep.iter().map(|&i| features.weights[i]).collect(),
        log_det_r: keep.iter().map(|&i| features.log_det_r[i]).collect(),
        descriptors: keep.iter().map(|&i| features.descriptors[i].clone()).collect(),
        pixel_coords: keep.iter().map(|&i| features.pixel_coords[i]).collect(),
        cells: keep.iter().map(|&i| features.cells[i]).collect(),
        raw_scores: keep.iter().map(|&i| features.raw_scores[i]).collect(),
        timestamp: features.timestamp,
    }
}

/// Differentiable per-frame quantities of a training window.
struct FrameFeatures {
    keypoints: Keypoints,
    scores: Vec<[f64; 3]>,
    blocks: Vec<WeightBlock>,
    descriptors: Vec<Vec<f64>>,
    points: Vec<Vector4<f64>>,
}

/// Forward state of one training window: per-frame features, soft matches
/// of every later frame against frame 0, and the dense weight/descriptor
/// maps the sparse reads came from (needed again by the reverse pass; the
/// detector map is not, since keypoints carry their own reverse rule).
struct WindowFeatures {
    frames: Vec<FrameFeatures>,
    /// Entry `k - 1` holds frame `k` matched against frame 0.
    matches: Vec<MatchSet>,
    weights: Tensor,
    descriptors: Tensor,
    size: usize,
    resolution: f64,
}

/// Runs the network in training mode over the stacked window and reads off
/// keypoints, weight scores, descriptors, and soft matches. The forward
/// tape stays armed on the model for a later reverse pass.
fn forward_window(
    model: &mut FeatureModel,
    images: &[CartesianImage],
    config: &TrainConfig,
) -> Result<WindowFeatures, TrainerError> {
    if images.len() < 2 {
        return Err(TrainerError::InvalidInput(format!(
            "a window needs at least 2 frames, got {}",
            images.len()
        )));
    }
    let size = images[0].size;
    let resolution = images[0].resolution;
    for img in images {
        if img.size != size || img.resolution != resolution {
            return Err(TrainerError::InvalidInput(
                "window images must share size and resolution".into(),
            ));
        }
    }
    let cell = model.arch.cell_size;
    if size % cell != 0 {
        return Err(TrainerError::InvalidInput(format!(
            "image size {size} is not divisible by cell size {cell}"
        )));
    }
    let w = images.len();
    let mut batch = Tensor::zeros(w, 1, size, size);
    for (k, img) in images.iter().enumerate() {
        for (d, &p) in batch.plane_mut(k, 0).iter_mut().zip(img.pixels.iter()) {
            *d = p as f64;
        }
    }
    let outputs = model.forward(&batch, true)?;

    let n_cells = (size / cell) * (size / cell);
    let mut frames = Vec::with_capacity(w);
    for (k, img) in images.iter().enumerate() {
        let valid = if config.ablations.no_masking {
            vec![true; n_cells]
        } else {
            cell_validity(img, cell, config.min_cell_occupancy)
        };
        let keypoints = extract_keypoints(outputs.detector.plane(k, 0), size, size, &valid, cell);
        let mut scores = Vec::with_capacity(keypoints.len());
        let mut blocks = Vec::with_capacity(keypoints.len());
        let mut descriptors = Vec::with_capacity(keypoints.len());
        let mut points = Vec::with_capacity(keypoints.len());
        for &c in &keypoints.coords {
            let s = sample_at(&outputs.weights, k, c[0], c[1])?;
            let s = [s[0], s[1], s[2]];
            let block = if config.ablations.scalar_weight {
                scalar_weight(s[0], config.z_weight)
            } else {
                assemble_weight(s, config.z_weight)
            };
            descriptors.push(sample_at(&outputs.descriptors, k, c[0], c[1])?);
            points.push(to_metric(c, size, resolution));
            scores.push(s);
            blocks.push(block);
        }
        frames.push(FrameFeatures {
            keypoints,
            scores,
            blocks,
            descriptors,
            points,
        });
    }

    let temperature = model.arch.temperature;
    let mut matches = Vec::with_capacity(w - 1);
    for k in 1..w {
        if frames[0].points.is_empty() || frames[k].points.is_empty() {
            matches.push(MatchSet {
                temperature,
                matches: Vec::new(),
            });
        } else {
            matches.push(match_keypoints(
                &frames[k].descriptors,
                &frames[0].descriptors,
                &frames[0].points,
                temperature,
            ));
        }
    }
    Ok(WindowFeatures {
        frames,
        matches,
        weights: outputs.weights,
        descriptors: outputs.descriptors,
        size,
        resolution,
    })
}

/// Builds one measurement factor per soft match, pairing each later frame
/// against frame 0. Returns the factors and their `(frame, keypoint)`
/// indices into the window features.
fn window_factors(
    wf: &WindowFeatures,
) -> Result<(Vec<MeasurementFactor>, Vec<(usize, usize)>), TrainerError> {
    let mut factors = Vec::new();
    let mut index = Vec::new();
    for k in 1..wf.frames.len() {
        for (i, m) in wf.matches[k - 1].matches.iter().enumerate() {
            // The soft point is a convex combination of exactly planar,
            // homogeneous points; re-pin the constant components so the
            // factor constructor's exactness checks hold.
            let reference = Vector4::new(m.point.x, m.point.y, 0.0, 1.0);
            factors.push(MeasurementFactor::new(
                wf.frames[k].points[i],
                reference,
                wf.frames[k].blocks[i].matrix,
                k,
            )?);
            index.push((k, i));
        }
    }
    Ok((factors, index))
}

/// Window initialization: frame `k` starts at the pure yaw
/// `angles[k] - angles[0]` (identity without augmentation) with zero
/// velocity. Rotating frame `k`'s image content by `a_k` rotates its
/// sensor frame, so the expected relative pose between augmented frames
/// picks up exactly this yaw offset.
fn initial_window(images: &[CartesianImage], angles: &[f64]) -> Result<WindowState, TrainerError> {
    let a0 = angles.first().copied().unwrap_or(0.0);
    let frames = images
        .iter()
        .enumerate()
        .map(|(k, img)| Frame {
            pose: Pose::planar(0.0, 0.0, angles.get(k).copied().unwrap_or(0.0) - a0),
            velocity: Twist::zero(),
            timestamp: img.timestamp,
        })
        .collect();
    WindowState::new(frames, 0).map_err(Into::into)
}

fn gate_passes(u2: f64, config: &TrainConfig) -> bool {
    config.ablations.no_mah_gate || u2 <= config.alpha
}

/// Exact `ln|W|` of keypoint `i` in frame `k`, avoiding the cancellation
/// of a numeric determinant.
fn log_det_w(wf: &WindowFeatures, k: usize, i: usize, config: &TrainConfig) -> f64 {
    if config.ablations.scalar_weight {
        3.0 * wf.frames[k].scores[i][0] + config.z_weight.ln()
    } else {
        wf.frames[k].blocks[i].log_det_r + config.z_weight.ln()
    }
}

/// The learning step's reverse pass: accumulates adjoints of the three
/// dense output maps from every gated factor and backpropagates them
/// through the network. Returns the flat parameter gradient and the
/// number of factors that passed the gate.
fn m_step(
    model: &mut FeatureModel,
    wf: &WindowFeatures,
    state: &WindowState,
    factors: &[MeasurementFactor],
    index: &[(usize, usize)],
    config: &TrainConfig,
) -> Result<(Vec<f64>, usize), TrainerError> {
    let w = wf.frames.len();
    let d_dim = model.arch.descriptor_dim();
    let mut g_det = Tensor::zeros(w, 1, wf.size, wf.size);
    let mut g_wgt = Tensor::zeros(w, 3, wf.size, wf.size);
    let mut g_desc = Tensor::zeros(w, d_dim, wf.size, wf.size);
    let mut coord_adj: Vec<Vec<[f64; 2]>> = wf
        .frames
        .iter()
        .map(|f| vec![[0.0; 2]; f.points.len()])
        .collect();
    let n_ref = wf.frames[0].points.len();
    let mut ref_desc_adj = vec![vec![0.0; d_dim]; n_ref];
    let mut ref_point_adj = vec![Vector4::zeros(); n_ref];
    let mut src_desc_adj: Vec<Vec<Vec<f64>>> = wf
        .frames
        .iter()
        .map(|f| vec![vec![0.0; d_dim]; f.points.len()])
        .collect();

    let x_tau = state.frame(0).pose.clone();
    let x_tau_inv = x_tau.inverse();
    let relative: Vec<nalgebra::Matrix4<f64>> = (0..w)
        .map(|k| *state.frame(k).pose.compose(&x_tau_inv).matrix())
        .collect();

    let mut inliers = 0usize;
    for (f, &(k, i)) in factors.iter().zip(index.iter()) {
        let e = measurement_error(&x_tau, &state.frame(k).pose, f);
        let u2 = (e.transpose() * f.weight * e)[0];
        if !gate_passes(u2, config) {
            continue;
        }
        inliers += 1;

        // d(0.5 e'We)/de, pushed to the two endpoints of the residual
        // e = D (z - A r) with A the relative pose of frame k.
        let g_e = f.weight * e;
        let g_z = Vector4::new(g_e.x, g_e.y, g_e.z, 0.0);
        let ga = to_metric_backward(&g_z, wf.resolution);
        coord_adj[k][i][0] += ga[0];
        coord_adj[k][i][1] += ga[1];

        let g_r = -(relative[k].transpose() * g_z);
        match_backward(
            &wf.matches[k - 1].matches[i],
            &wf.frames[k].descriptors[i],
            &wf.frames[0].descriptors,
            &wf.frames[0].points,
            wf.matches[k - 1].temperature,
            &g_r,
            &mut src_desc_adj[k][i],
            &mut ref_desc_adj,
            &mut ref_point_adj,
        );

        // d(0.5 e'We - ln|W|)/dW with the log-determinant pulled back to
        // the sampled weight scores.
        let g_w = (e * e.transpose()) * 0.5;
        let s = wf.frames[k].scores[i];
        let s_adj = if config.ablations.scalar_weight {
            [
                scalar_weight_backward(s[0], config.z_weight, &g_w, -1.0),
                0.0,
                0.0,
            ]
        } else {
            assemble_weight_backward(s, &g_w, -1.0)
        };
        let c = wf.frames[k].keypoints.coords[i];
        let (gx, gy) = sample_at_backward(&wf.weights, k, c[0], c[1], &s_adj, &mut g_wgt);
        coord_adj[k][i][0] += gx;
        coord_adj[k][i][1] += gy;
    }

    // Reference-frame adjoints accumulated across every match: metric
    // positions and sampled descriptors both move with the keypoints.
    for j in 0..n_ref {
        let ga = to_metric_backward(&ref_point_adj[j], wf.resolution);
        coord_adj[0][j][0] += ga[0];
        coord_adj[0][j][1] += ga[1];
        let c = wf.frames[0].keypoints.coords[j];
        let (gx, gy) = sample_at_backward(&wf.descriptors, 0, c[0], c[1], &ref_desc_adj[j], &mut g_desc);
        coord_adj[0][j][0] += gx;
        coord_adj[0][j][1] += gy;
    }
    for (k, frame) in wf.frames.iter().enumerate().skip(1) {
        for i in 0..frame.points.len() {
            let c = frame.keypoints.coords[i];
            let (gx, gy) =
                sample_at_backward(&wf.descriptors, k, c[0], c[1], &src_desc_adj[k][i], &mut g_desc);
            coord_adj[k][i][0] += gx;
            coord_adj[k][i][1] += gy;
        }
    }
    for (k, frame) in wf.frames.iter().enumerate() {
        frame.keypoints.backward(&coord_adj[k], g_det.plane_mut(k, 0));
    }

    model.zero_grad();
    let grads = model.backprop(&OutputAdjoints {
        detector: Some(g_det),
        weights: Some(g_wgt),
        descriptors: Some(g_desc),
    })?;
    Ok((grads, inliers))
}

/// Measurement part of the variational objective at a fixed window state,
/// with the same gating the gradient uses: the sum over included factors
/// of `0.5 e'We - ln|W|`. The forward pass runs in training mode so the
/// value corresponds exactly to [`measurement_gradient`].
pub fn measurement_loss(
    model: &mut FeatureModel,
    images: &[CartesianImage],
    state: &WindowState,
    config: &TrainConfig,
) -> Result<f64, TrainerError> {
    let wf = forward_window(model, images, config)?;
    model.clear_tape();
    let (factors, index) = window_factors(&wf)?;
    let mut objective = 0.0;
    for (f, &(k, i)) in factors.iter().zip(index.iter()) {
        let e = measurement_error(&state.frame(0).pose, &state.frame(k).pose, f);
        let u2 = (e.transpose() * f.weight * e)[0];
        if gate_passes(u2, config) {
            objective += 0.5 * u2 - log_det_w(&wf, k, i, config);
        }
    }
    Ok(objective)
}

/// Flat parameter gradient of [`measurement_loss`] at a fixed window
/// state, plus the number of factors that passed the gate.
pub fn measurement_gradient(
    model: &mut FeatureModel,
    images: &[CartesianImage],
    state: &WindowState,
    config: &TrainConfig,
) -> Result<(Vec<f64>, usize), TrainerError> {
    let wf = forward_window(model, images, config)?;
    let (factors, index) = window_factors(&wf)?;
    m_step(model, &wf, state, &factors, &index, config)
}

/// Diagnostics of one training step.
#[derive(Debug, Clone)]
pub struct TrainMetrics {
    /// Variational objective at the posterior mean (prior + measurement
    /// + entropy when available).
    pub loss: f64,
    pub prior_loss: f64,
    pub measurement_loss: f64,
    pub entropy: Option<f64>,
    /// Total factors built for the window.
    pub factors: usize,
    /// Factors that passed the gate into the gradient.
    pub inliers: usize,
    pub grad_norm: f64,
    /// Root-sum-square pose motion from initialization to posterior mean.
    pub pose_change: f64,
}

/// One estimation-then-learning step on a window of projected scans.
///
/// `angles[k]` is the rotation augmentation already applied to
/// `images[k]` (pass zeros or an empty slice when none): the window
/// initialization folds in the relative yaw so the solve starts inside
/// the right basin. Solver failures propagate before any parameter is
/// touched.
pub fn train_step(
    model: &mut FeatureModel,
    images: &[CartesianImage],
    angles: &[f64],
    config: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<TrainMetrics, TrainerError> {
    config.validate()?;
    if !angles.is_empty() && angles.len() != images.len() {
        return Err(TrainerError::InvalidInput(format!(
            "got {} angles for {} images",
            angles.len(),
            images.len()
        )));
    }

    let wf = forward_window(model, images, config)?;
    let (factors, index) = window_factors(&wf)?;
    let state = initial_window(images, angles)?;
    let motion_prior = MotionPrior::new(config.qc_diag)?;
    let priors: Vec<PriorFactor> = (0..state.len() - 1)
        .map(|k| PriorFactor::between(&motion_prior, &state, k, k + 1))
        .collect::<Result<_, _>>()?;

    // Estimation step: robust solve for the window posterior.
    let posterior = solve_window(&state, &priors, &factors, &SolverOptions::default())?;
    let breakdown = esgvi_loss(&posterior, &priors, &factors);

    // Learning step: gradient at the posterior mean, poses held fixed.
    let (grads, inliers) = m_step(model, &wf, &posterior.mean, &factors, &index, config)?;
    let mut params = model.params_flat();
    opt.apply(&mut params, &grads, config.learning_rate);
    model.set_params_flat(&params)?;

    let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    let pose_change = (0..state.len())
        .map(|k| {
            let d = posterior
                .mean
                .frame(k)
                .pose
                .compose(&state.frame(k).pose.inverse());
            log_map(&d).map(|t| t.norm()).unwrap_or(f64::INFINITY)
        })
        .map(|n| n * n)
        .sum::<f64>()
        .sqrt();
    Ok(TrainMetrics {
        loss: breakdown.total,
        prior_loss: breakdown.prior,
        measurement_loss: breakdown.measurement,
        entropy: breakdown.entropy,
        factors: factors.len(),
        inliers,
        grad_norm,
        pose_change,
    })
}

/// Summary of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    /// Windows skipped because the solver failed on them.
    pub skipped: usize,
    /// Variational objective of every completed step, in order.
    pub losses: Vec<f64>,
}

/// The training driver: samples window starts uniformly with a fixed
/// seed, applies rotation augmentation, runs [`train_step`], appends one
/// CSV row per step (`step,loss,inliers,grad_norm,wall_ms`; skipped
/// windows log a `nan` loss), and checkpoints periodically.
pub fn train(
    model: &mut FeatureModel,
    scans: &[CartesianImage],
    config: &TrainConfig,
    log_path: Option<&Path>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainerError> {
    config.validate()?;
    let w = config.window_size;
    if scans.len() < w {
        return Err(TrainerError::InvalidInput(format!(
            "need at least {} scans for a window, got {}",
            w,
            scans.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::new(model.n_params());
    let mut log = match log_path {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p)?);
            writeln!(f, "step,loss,inliers,grad_norm,wall_ms")?;
            Some(f)
        }
        None => None,
    };
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut losses = Vec::new();
    let mut skipped = 0usize;
    let augment = !config.ablations.no_augmentation && config.aug_max_angle > 0.0;
    for step in 1..=config.max_steps {
        let started = Instant::now();
        let start = rng.random_range(0..=scans.len() - w);
        let window = &scans[start..start + w];
        let (images, angles) = if augment {
            let mut images = Vec::with_capacity(w);
            let mut angles = Vec::with_capacity(w);
            for img in window {
                let (rotated, angle) = augment_rotation(img, config.aug_max_angle, &mut rng);
                images.push(rotated);
                angles.push(angle);
            }
            (images, angles)
        } else {
            (window.to_vec(), vec![0.0; w])
        };
        match train_step(model, &images, &angles, config, &mut opt) {
            Ok(metrics) => {
                losses.push(metrics.loss);
                if let Some(f) = log.as_mut() {
                    let ms = started.elapsed().as_secs_f64() * 1e3;
                    writeln!(
                        f,
                        "{step},{:.9e},{},{:.9e},{ms:.3}",
                        metrics.loss, metrics.inliers, metrics.grad_norm
                    )?;
                }
            }
            Err(e) if e.is_window_failure() => {
                skipped += 1;
                if let Some(f) = log.as_mut() {
                    let ms = started.elapsed().as_secs_f64() * 1e3;
                    writeln!(f, "{step},nan,0,0,{ms:.3}")?;
                }
            }
            Err(e) => return Err(e),
        }
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                save_model(model, &dir.join(format!("step_{step:06}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_model(model, &dir.join("final.ckpt"))?;
    }
    if let Some(mut f) = log {
        f.flush()?;
    }
    Ok(TrainOutcome {
        steps: config.max_steps,
        skipped,
        losses,
    })
}

/// Inference-time odometry settings.
#[derive(Debug, Clone)]
pub struct OdometryConfig {
    /// Frames per sliding window; at least 2.
    pub window_size: usize,
    /// Feature extraction settings; `score_gate` is the confidence
    /// threshold applied through [`inference_filter`].
    pub frontend: FrontendConfig,
    pub solver: SolverOptions,
    pub qc_diag: Vector6<f64>,
    /// Interpret weight scores through [`scalar_weight`] (must match how
    /// the model was trained).
    pub scalar_weight: bool,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        OdometryConfig {
            window_size: 4,
            frontend: FrontendConfig::default(),
            solver: SolverOptions::default(),
            qc_diag: Vector6::new(1.0, 1.0, 1.0, 0.1, 0.1, 0.1),
            scalar_weight: false,
        }
    }
}

/// A full odometry run: world-frame trajectory, body-frame velocity
/// twists, and a per-frame flag marking dead-reckoned poses.
#[derive(Debug, Clone)]
pub struct OdometryResult {
    pub trajectory: Trajectory,
    pub velocities: Vec<Twist>,
    /// True where the window solve failed and the pose is the
    /// constant-velocity extrapolation instead.
    pub fallbacks: Vec<bool>,
}

/// Applies the scalar-weight reinterpretation and the confidence filter
/// to an extracted feature set.
fn prepare_features(set: &FeatureSet, config: &OdometryConfig) -> FeatureSet {
    let mut out = set.clone();
    if config.scalar_weight {
        for i in 0..out.points.len() {
            let block = scalar_weight(out.raw_scores[i][0], config.frontend.z_weight);
            out.weights[i] = block.matrix;
            out.log_det_r[i] = block.log_det_r;
        }
    }
    match config.frontend.score_gate {
        Some(eta) => inference_filter(&out, eta),
        None => out,
    }
}

/// Soft-matches every later window frame against the window's first
/// (locked) frame and builds one factor per source keypoint.
fn sliding_factors(
    sets: &[FeatureSet],
    i0: usize,
    w: usize,
    temperature: f64,
) -> Result<Vec<MeasurementFactor>, TrainerError> {
    let reference = &sets[i0];
    let mut factors = Vec::new();
    if reference.points.is_empty() {
        return Ok(factors);
    }
    for k in 1..w {
        let src = &sets[i0 + k];
        if src.points.is_empty() {
            continue;
        }
        let mset = match_keypoints(
            &src.descriptors,
            &reference.descriptors,
            &reference.points,
            temperature,
        );
        for (i, m) in mset.matches.iter().enumerate() {
            let r = Vector4::new(m.point.x, m.point.y, 0.0, 1.0);
            factors.push(MeasurementFactor::new(src.points[i], r, src.weights[i], k)?);
        }
    }
    Ok(factors)
}

/// Sliding-window odometry over per-frame feature sets. The window moves
/// one frame at a time; each slide locks the oldest solved pose, which is
/// also the matching target of the frames behind it. Emits exactly one
/// world-frame pose per input frame, deterministically. When a window
/// solve fails, the affected pose stays at its constant-velocity
/// extrapolation and is flagged.
pub fn run_odometry_from_features(
    features: &[FeatureSet],
    temperature: f64,
    config: &OdometryConfig,
) -> Result<OdometryResult, TrainerError> {
    let w = config.window_size;
    if w < 2 {
        return Err(TrainerError::InvalidConfig(format!(
            "window_size must be >= 2, got {w}"
        )));
    }
    let n = features.len();
    if n < w {
        return Err(TrainerError::InvalidInput(format!(
            "need at least {w} frames, got {n}"
        )));
    }
    let sets: Vec<FeatureSet> = features.iter().map(|f| prepare_features(f, config)).collect();
    let motion_prior = MotionPrior::new(config.qc_diag)?;
    let mut state = WindowState::new(
        (0..w)
            .map(|k| Frame {
                pose: Pose::identity(),
                velocity: Twist::zero(),
                timestamp: sets[k].timestamp,
            })
            .collect(),
        0,
    )?;

    // Estimator-convention poses (world-to-body); inverted on emission.
    let mut est_poses = vec![Pose::identity(); n];
    let mut velocities = vec![Twist::zero(); n];
    let mut fallbacks = vec![false; n];

    for i0 in 0..=(n - w) {
        let factors = sliding_factors(&sets, i0, w, temperature)?;
        let priors: Vec<PriorFactor> = (0..w - 1)
            .map(|k| PriorFactor::between(&motion_prior, &state, k, k + 1))
            .collect::<Result<_, _>>()?;
        let fallback = match solve_window(&state, &priors, &factors, &config.solver) {
            Ok(posterior) => {
                state = posterior.mean;
                false
            }
            // Hold the constant-velocity initialization for this window.
            Err(EstimatorError::SolverDiverged(_)) | Err(EstimatorError::SingularSystem) => true,
            Err(e) => return Err(e.into()),
        };
        if i0 == 0 {
            velocities[0] = state.frame(0).velocity;
        }
        if i0 < n - w {
            est_poses[i0 + 1] = state.frame(1).pose.clone();
            velocities[i0 + 1] = state.frame(1).velocity;
            fallbacks[i0 + 1] = fallback;
            let dt = sets[i0 + w].timestamp - state.frame(w - 1).timestamp;
            let next = state.extrapolate(dt);
            state.slide(next)?;
        } else {
            for k in 1..w {
                est_poses[i0 + k] = state.frame(k).pose.clone();
                velocities[i0 + k] = state.frame(k).velocity;
                fallbacks[i0 + k] = fallback;
            }
        }
    }

    let timestamps: Vec<f64> = sets.iter().map(|s| s.timestamp).collect();
    let world_poses: Vec<Pose> = est_poses.iter().map(|p| p.inverse()).collect();
    // Estimator velocities propagate world-to-body poses; negate to get
    // body-frame twists matching the groundtruth convention.
    let body_velocities: Vec<Twist> = velocities.iter().map(|v| v.scaled(-1.0)).collect();
    Ok(OdometryResult {
        trajectory: Trajectory::new(timestamps, world_poses),
        velocities: body_velocities,
        fallbacks,
    })
}

/// Extracts features from every projected scan with the model in
/// evaluation mode, then runs [`run_odometry_from_features`].
pub fn run_odometry(
    model: &mut FeatureModel,
    scans: &[CartesianImage],
    config: &OdometryConfig,
) -> Result<OdometryResult, TrainerError> {
    let extraction = FrontendConfig {
        score_gate: None,
        ..config.frontend.clone()
    };
    let mut sets = Vec::with_capacity(scans.len());
    for scan in scans {
        sets.push(extract_features(model, scan, &extraction)?);
    }
    run_odometry_from_features(&sets, model.arch.temperature, config)
}
