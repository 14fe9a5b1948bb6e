//! Differentiable operations between the network's dense maps and the
//! estimator's sparse inputs.
//!
//! The training loss reaches the network parameters through four distinct
//! paths, each implemented here as a forward/backward pair:
//!
//! 1. detector scores -> per-cell spatial softmax -> keypoint pixel
//!    coordinates -> metric landmark positions,
//! 2. descriptor map -> bilinear sampling at keypoint coordinates ->
//!    softmax matching -> soft reference points,
//! 3. weight-score map -> bilinear sampling -> inverse-covariance
//!    assembly, and
//! 4. the sampling *coordinates* themselves, which couple paths 2 and 3
//!    back into path 1.
//!
//! The pixel convention matches the scan projection: a keypoint coordinate
//! is `[column, row]`, the image centre is the sensor origin, columns grow
//! with +x and rows grow with +y, and one pixel spans `resolution` metres.

use nalgebra::{Matrix3, Vector4};

use super::model::FeatureModel;
use super::tensor::Tensor;
use super::FeatureError;
use crate::scan::{cell_validity, CartesianImage};

/// Keypoints extracted from a detector map: one per valid cell, each the
/// softmax-weighted expected pixel coordinate of its cell. Keeps the
/// softmax weights so the reverse pass can be replayed.
#[derive(Debug, Clone)]
pub struct Keypoints {
    /// Sub-pixel coordinates as `[column, row]`, one entry per valid cell.
    pub coords: Vec<[f64; 2]>,
    /// Row-major cell index of each keypoint.
    pub cells: Vec<usize>,
    pub cell_size: usize,
    pub height: usize,
    pub width: usize,
    weights: Vec<Vec<f64>>,
}

/// Spatial softmax over every valid cell of a detector plane.
///
/// `scores` is a row-major `height` by `width` plane of raw detector
/// outputs; `valid` flags cells in row-major cell order (as produced by
/// [`cell_validity`]). Scores are shifted by the cell maximum before
/// exponentiation, so arbitrarily large raw scores are safe. A cell with
/// uniform scores yields exactly its centroid.
pub fn extract_keypoints(
    scores: &[f64],
    height: usize,
    width: usize,
    valid: &[bool],
    cell_size: usize,
) -> Keypoints {
    assert!(cell_size > 0, "cell size must be positive");
    assert!(
        height % cell_size == 0 && width % cell_size == 0,
        "image size {height}x{width} not divisible by cell size {cell_size}"
    );
    assert_eq!(scores.len(), height * width, "score plane size mismatch");
    let grid_rows = height / cell_size;
    let grid_cols = width / cell_size;
    assert_eq!(valid.len(), grid_rows * grid_cols, "cell mask size mismatch");

    let mut coords = Vec::new();
    let mut cells = Vec::new();
    let mut weights = Vec::new();
    let mut cell_scores = vec![0.0; cell_size * cell_size];
    for cy in 0..grid_rows {
        for cx in 0..grid_cols {
            let cell = cy * grid_cols + cx;
            if !valid[cell] {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for r in 0..cell_size {
                let row = cy * cell_size + r;
                let base = row * width + cx * cell_size;
                for c in 0..cell_size {
                    let v = scores[base + c];
                    cell_scores[r * cell_size + c] = v;
                    if v > max {
                        max = v;
                    }
                }
            }
            let mut sum = 0.0;
            let mut w = vec![0.0; cell_size * cell_size];
            for (wi, &s) in w.iter_mut().zip(cell_scores.iter()) {
                let e = (s - max).exp();
                *wi = e;
                sum += e;
            }
            let mut col = 0.0;
            let mut row = 0.0;
            for r in 0..cell_size {
                for c in 0..cell_size {
                    let wi = w[r * cell_size + c] / sum;
                    w[r * cell_size + c] = wi;
                    col += wi * (cx * cell_size + c) as f64;
                    row += wi * (cy * cell_size + r) as f64;
                }
            }
            // The expectation is a convex combination of in-cell indices;
            // clamp away the float roundoff that can leak past the border.
            let col = col.clamp((cx * cell_size) as f64, (cx * cell_size + cell_size - 1) as f64);
            let row = row.clamp((cy * cell_size) as f64, (cy * cell_size + cell_size - 1) as f64);
            coords.push([col, row]);
            cells.push(cell);
            weights.push(w);
        }
    }
    Keypoints {
        coords,
        cells,
        cell_size,
        height,
        width,
        weights,
    }
}

impl Keypoints {
    /// Number of extracted keypoints.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Reverse pass: accumulates the detector-plane adjoint for the given
    /// coordinate adjoints (`[d/d_column, d/d_row]` per keypoint).
    ///
    /// For softmax weights `w_i` over a cell's pixels `p_i` and the expected
    /// coordinate `k = sum_i w_i p_i`, the score adjoint of pixel `i` is
    /// `w_i * (p_i - k) . g`.
    pub fn backward(&self, coord_adjoints: &[[f64; 2]], score_grads: &mut [f64]) {
        assert_eq!(coord_adjoints.len(), self.coords.len());
        assert_eq!(score_grads.len(), self.height * self.width);
        let grid_cols = self.width / self.cell_size;
        for (i, (&cell, w)) in self.cells.iter().zip(self.weights.iter()).enumerate() {
            let g = coord_adjoints[i];
            if g[0] == 0.0 && g[1] == 0.0 {
                continue;
            }
            let k = self.coords[i];
            let cy = cell / grid_cols;
            let cx = cell % grid_cols;
            for r in 0..self.cell_size {
                let row = cy * self.cell_size + r;
                let base = row * self.width + cx * self.cell_size;
                for c in 0..self.cell_size {
                    let px = (cx * self.cell_size + c) as f64;
                    let py = row as f64;
                    let inner = (px - k[0]) * g[0] + (py - k[1]) * g[1];
                    score_grads[base + c] += w[r * self.cell_size + c] * inner;
                }
            }
        }
    }
}

/// Resolves the four bilinear taps for a fractional coordinate on one axis.
/// Coordinates may sit exactly on the last valid index.
#[inline]
fn bilinear_axis(v: f64, n: usize) -> (usize, f64) {
    let i0 = if n >= 2 { (v.floor() as usize).min(n - 2) } else { 0 };
    (i0, v - i0 as f64)
}

/// Bilinear sample of all channels of one batch element at the fractional
/// pixel coordinate `(x, y)` (column, row). Coordinates must lie within
/// `[0, width - 1] x [0, height - 1]`.
pub fn sample_at(map: &Tensor, n: usize, x: f64, y: f64) -> Result<Vec<f64>, FeatureError> {
    let (_, channels, h, w) = map.shape();
    if !(x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64) {
        return Err(FeatureError::OutOfBounds {
            x,
            y,
            width: w,
            height: h,
        });
    }
    let (x0, fx) = bilinear_axis(x, w);
    let (y0, fy) = bilinear_axis(y, h);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let mut out = Vec::with_capacity(channels);
    for c in 0..channels {
        let plane = map.plane(n, c);
        let top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
        let bot = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
        out.push((1.0 - fy) * top + fy * bot);
    }
    Ok(out)
}

/// Reverse pass of [`sample_at`]: scatters the per-channel output adjoint
/// onto the map adjoint and returns the coordinate adjoint `(gx, gy)`.
/// The coordinate gradient needs the map *values*, so the sampled map is
/// taken alongside its adjoint buffer.
pub fn sample_at_backward(
    map: &Tensor,
    n: usize,
    x: f64,
    y: f64,
    out_adjoint: &[f64],
    map_adjoint: &mut Tensor,
) -> (f64, f64) {
    let (_, channels, h, w) = map.shape();
    assert_eq!(out_adjoint.len(), channels);
    assert_eq!(map_adjoint.shape(), map.shape());
    let (x0, fx) = bilinear_axis(x, w);
    let (y0, fy) = bilinear_axis(y, h);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let mut gx = 0.0;
    let mut gy = 0.0;
    for c in 0..channels {
        let g = out_adjoint[c];
        let plane = map.plane(n, c);
        let v00 = plane[y0 * w + x0];
        let v01 = plane[y0 * w + x1];
        let v10 = plane[y1 * w + x0];
        let v11 = plane[y1 * w + x1];
        gx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
        gy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
        let gp = map_adjoint.plane_mut(n, c);
        gp[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
        gp[y0 * w + x1] += g * (1.0 - fy) * fx;
        gp[y1 * w + x0] += g * fy * (1.0 - fx);
        gp[y1 * w + x1] += g * fy * fx;
    }
    (gx, gy)
}

/// Converts a pixel coordinate `[column, row]` to a homogeneous metric
/// point in the sensor frame. The image centre maps to the origin; columns
/// grow with +x and rows with +y at `resolution` metres per pixel. The
/// landmark plane is flat, so z is 0 and w is 1.
pub fn to_metric(coords: [f64; 2], image_size: usize, resolution: f64) -> Vector4<f64> {
    let half = image_size as f64 / 2.0;
    Vector4::new(
        (coords[0] - half) * resolution,
        (coords[1] - half) * resolution,
        0.0,
        1.0,
    )
}

/// Coordinate adjoint of [`to_metric`]: the map is affine with diagonal
/// Jacobian `resolution` on the x and y components.
pub fn to_metric_backward(metric_adjoint: &Vector4<f64>, resolution: f64) -> [f64; 2] {
    [metric_adjoint.x * resolution, metric_adjoint.y * resolution]
}

/// One soft correspondence: the attention-weighted reference point together
/// with the raw responses and softmax attention that produced it.
#[derive(Debug, Clone)]
pub struct SoftMatch {
    /// Convex combination of the reference points.
    pub point: Vector4<f64>,
    /// Raw descriptor dot products against every reference keypoint.
    pub responses: Vec<f64>,
    /// Softmax of `temperature * responses`; non-negative, sums to one.
    pub attention: Vec<f64>,
}

/// Soft matches of a set of source keypoints against one reference set.
#[derive(Debug, Clone)]
pub struct MatchSet {
    pub temperature: f64,
    pub matches: Vec<SoftMatch>,
}

/// Matches every source descriptor against the reference set.
///
/// For source descriptor `d` and reference descriptors `d_1..d_N`, the
/// responses are the raw (unnormalised) dot products `c_n = d . d_n`; the
/// soft reference point is `sum_n a_n p_n` with
/// `a = softmax(temperature * c)`. The softmax subtracts the maximum
/// before exponentiation, so large descriptor magnitudes cannot overflow.
/// With a single reference point the match returns exactly that point;
/// as the temperature approaches zero the match tends to the unweighted
/// average of the reference points.
pub fn match_keypoints(
    src_descriptors: &[Vec<f64>],
    ref_descriptors: &[Vec<f64>],
    ref_points: &[Vector4<f64>],
    temperature: f64,
) -> MatchSet {
    assert!(!ref_descriptors.is_empty(), "reference set must be non-empty");
    assert_eq!(
        ref_descriptors.len(),
        ref_points.len(),
        "reference descriptors and points disagree"
    );
    assert!(temperature > 0.0, "temperature must be positive");
    let dim = ref_descriptors[0].len();
    let mut matches = Vec::with_capacity(src_descriptors.len());
    for src in src_descriptors {
        assert_eq!(src.len(), dim, "descriptor dimension mismatch");
        let responses: Vec<f64> = ref_descriptors
            .iter()
            .map(|r| src.iter().zip(r.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let max = responses
            .iter()
            .fold(f64::NEG_INFINITY, |m, &c| m.max(temperature * c));
        let mut attention: Vec<f64> = responses
            .iter()
            .map(|&c| (temperature * c - max).exp())
            .collect();
        let sum: f64 = attention.iter().sum();
        for a in attention.iter_mut() {
            *a /= sum;
        }
        let mut point = Vector4::zeros();
        for (a, p) in attention.iter().zip(ref_points.iter()) {
            point += *a * p;
        }
        matches.push(SoftMatch {
            point,
            responses,
            attention,
        });
    }
    MatchSet {
        temperature,
        matches,
    }
}

/// Reverse pass of one soft match. Accumulates the adjoints of the source
/// descriptor, the reference descriptors, and the reference points for a
/// given adjoint of the soft point.
///
/// With `a = softmax(T c)` and `r = sum_n a_n p_n`:
/// `da_n = p_n . g`, `dc = T * a ∘ (da - <a, da>)`, and the descriptor
/// adjoints follow from the bilinearity of the responses.
#[allow(clippy::too_many_arguments)]
pub fn match_backward(
    m: &SoftMatch,
    src_descriptor: &[f64],
    ref_descriptors: &[Vec<f64>],
    ref_points: &[Vector4<f64>],
    temperature: f64,
    point_adjoint: &Vector4<f64>,
    src_adjoint: &mut [f64],
    ref_descriptor_adjoints: &mut [Vec<f64>],
    ref_point_adjoints: &mut [Vector4<f64>],
) {
    let n = ref_descriptors.len();
    assert_eq!(m.attention.len(), n);
    let g_a: Vec<f64> = ref_points.iter().map(|p| p.dot(point_adjoint)).collect();
    let mean: f64 = m.attention.iter().zip(g_a.iter()).map(|(a, g)| a * g).sum();
    for i in 0..n {
        let g_c = temperature * m.attention[i] * (g_a[i] - mean);
        ref_point_adjoints[i] += m.attention[i] * point_adjoint;
        if g_c != 0.0 {
            for (gs, &r) in src_adjoint.iter_mut().zip(ref_descriptors[i].iter()) {
                *gs += g_c * r;
            }
            for (gr, &s) in ref_descriptor_adjoints[i].iter_mut().zip(src_descriptor.iter()) {
                *gr += g_c * s;
            }
        }
    }
}

/// A per-point inverse measurement covariance assembled from the three
/// weight scores, plus the log-determinant of its planar block.
#[derive(Debug, Clone)]
pub struct WeightBlock {
    pub matrix: Matrix3<f64>,
    /// `log det R = d1 + d2` by construction.
    pub log_det_r: f64,
}

/// Builds the inverse covariance `W = blkdiag(R, z_weight)` with
/// `R = L diag(exp(d1), exp(d2)) L^T` and `L = [[1, 0], [d3, 1]]`.
///
/// The factorisation guarantees positive definiteness for any finite
/// scores, and its planar log-determinant is `d1 + d2` exactly. The z
/// block is a fixed large stiffness pinning the planar measurement model.
pub fn assemble_weight(scores: [f64; 3], z_weight: f64) -> WeightBlock {
    assert!(z_weight > 0.0, "z weight must be positive");
    let [d1, d2, d3] = scores;
    let e1 = d1.exp();
    let e2 = d2.exp();
    let mut matrix = Matrix3::zeros();
    matrix[(0, 0)] = e1;
    matrix[(0, 1)] = d3 * e1;
    matrix[(1, 0)] = d3 * e1;
    matrix[(1, 1)] = d3 * d3 * e1 + e2;
    matrix[(2, 2)] = z_weight;
    WeightBlock {
        matrix,
        log_det_r: d1 + d2,
    }
}

/// Reverse pass of [`assemble_weight`]: adjoints of the three scores given
/// adjoints of the full matrix and of the planar log-determinant.
pub fn assemble_weight_backward(
    scores: [f64; 3],
    matrix_adjoint: &Matrix3<f64>,
    log_det_adjoint: f64,
) -> [f64; 3] {
    let [d1, d2, d3] = scores;
    let e1 = d1.exp();
    let e2 = d2.exp();
    let g00 = matrix_adjoint[(0, 0)];
    let g01 = matrix_adjoint[(0, 1)] + matrix_adjoint[(1, 0)];
    let g11 = matrix_adjoint[(1, 1)];
    [
        e1 * (g00 + d3 * g01 + d3 * d3 * g11) + log_det_adjoint,
        e2 * g11 + log_det_adjoint,
        e1 * (g01 + 2.0 * d3 * g11),
    ]
}

/// Sparse features of one radar frame, ready for the estimator: metric
/// landmark positions, inverse covariances, and matching descriptors.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    /// Homogeneous landmark positions in the sensor frame.
    pub points: Vec<Vector4<f64>>,
    /// Inverse measurement covariances, one per point.
    pub weights: Vec<Matrix3<f64>>,
    /// Planar log-determinants `d1 + d2`, the per-point confidence score.
    pub log_det_r: Vec<f64>,
    /// Descriptors sampled at the keypoint coordinates.
    pub descriptors: Vec<Vec<f64>>,
    /// Sub-pixel coordinates as `[column, row]`.
    pub pixel_coords: Vec<[f64; 2]>,
    /// Row-major cell index of each keypoint.
    pub cells: Vec<usize>,
    /// Raw weight scores `(d1, d2, d3)` per point.
    pub raw_scores: Vec<[f64; 3]>,
    pub timestamp: f64,
}

/// Inference-time feature extraction settings.
#[derive(Debug, Clone)]
pub struct FrontendConfig {
    /// Minimum fraction of valid pixels for a cell to yield a keypoint.
    pub min_cell_occupancy: f64,
    /// Fixed stiffness of the out-of-plane weight block.
    pub z_weight: f64,
    /// Keep only points with `log_det_r` at or above this confidence;
    /// `None` keeps everything (training mode).
    pub score_gate: Option<f64>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            min_cell_occupancy: 0.05,
            z_weight: 1e4,
            score_gate: Some(4.0),
        }
    }
}

/// Converts a projected radar image into a single-element input batch.
pub fn image_to_tensor(image: &CartesianImage) -> Tensor {
    let mut t = Tensor::zeros(1, 1, image.size, image.size);
    for (d, &p) in t.data.iter_mut().zip(image.pixels.iter()) {
        *d = p as f64;
    }
    t
}

/// Runs the frozen model on one image and assembles the sparse feature set.
///
/// Cells with too few valid pixels are dropped before extraction; when a
/// confidence gate is configured, points whose planar log-determinant falls
/// below it are dropped afterwards.
pub fn extract_features(
    model: &mut FeatureModel,
    image: &CartesianImage,
    config: &FrontendConfig,
) -> Result<FeatureSet, FeatureError> {
    let input = image_to_tensor(image);
    let outputs = model.forward(&input, false)?;
    let cell_size = model.arch.cell_size;
    let valid = cell_validity(image, cell_size, config.min_cell_occupancy);
    let keypoints = extract_keypoints(
        outputs.detector.plane(0, 0),
        image.size,
        image.size,
        &valid,
        cell_size,
    );
    let mut set = FeatureSet {
        points: Vec::new(),
        weights: Vec::new(),
        log_det_r: Vec::new(),
        descriptors: Vec::new(),
        pixel_coords: Vec::new(),
        cells: Vec::new(),
        raw_scores: Vec::new(),
        timestamp: image.timestamp,
    };
    for (i, &coords) in keypoints.coords.iter().enumerate() {
        let scores = sample_at(&outputs.weights, 0, coords[0], coords[1])?;
        let scores = [scores[0], scores[1], scores[2]];
        let block = assemble_weight(scores, config.z_weight);
        if let Some(gate) = config.score_gate {
            if block.log_det_r < gate {
                continue;
            }
        }
        let descriptor = sample_at(&outputs.descriptors, 0, coords[0], coords[1])?;
        set.points.push(to_metric(coords, image.size, image.resolution));
        set.weights.push(block.matrix);
        set.log_det_r.push(block.log_det_r);
        set.descriptors.push(descriptor);
        set.pixel_coords.push(coords);
        set.cells.push(keypoints.cells[i]);
        set.raw_scores.push(scores);
    }
    Ok(set)
}
