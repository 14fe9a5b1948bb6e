//! Learned radar feature frontend.
//!
//! A small convolutional encoder-decoder turns a Cartesian radar image into
//! three dense maps — keypoint scores, weight scores, and descriptors — from
//! which sparse, estimator-ready features are read off differentiably:
//! per-cell spatial softmax for sub-pixel keypoints, bilinear sampling for
//! descriptors and weight scores, a temperature-scaled softmax matcher for
//! soft correspondences, and a triangular-factor assembly for per-point
//! inverse covariances.
//!
//! Everything is written against hand-rolled reverse-mode differentiation:
//! the network records a tape of activations during a training-mode forward
//! pass, and each sparse operation ships an exact adjoint. The composite
//! gradient of a scalar loss with respect to every network parameter is
//! verified against central finite differences in the test suites.
//!
//! Module layout:
//!
//! * [`tensor`] — dense rank-4 activation storage,
//! * [`layers`] — convolution, batch normalisation, pooling, resizing,
//! * [`model`] — the encoder-decoder with its output heads and flat
//!   parameter access,
//! * [`ops`] — differentiable keypoint, sampling, matching, and weight
//!   operations plus inference-time feature extraction,
//! * [`checkpoint`] — binary model serialisation.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod ops;
pub mod tensor;

use thiserror::Error;

pub use checkpoint::{load_model, save_model};
pub use model::{Arch, FeatureModel, NetOutputs, OutputAdjoints};
pub use ops::{
    assemble_weight, assemble_weight_backward, extract_features, extract_keypoints,
    image_to_tensor, match_backward, match_keypoints, sample_at, sample_at_backward, to_metric,
    to_metric_backward, FeatureSet, FrontendConfig, Keypoints, MatchSet, SoftMatch, WeightBlock,
};
pub use tensor::Tensor;

/// Errors of the feature frontend.
#[derive(Debug, Error)]
pub enum FeatureError {
    /// The input image size is not divisible by the network's total
    /// downsampling factor.
    #[error("image size {height}x{width} is not divisible by {factor}")]
    SizeIndivisible {
        height: usize,
        width: usize,
        factor: usize,
    },

    /// A sampling coordinate fell outside the image.
    #[error("sample coordinate ({x}, {y}) outside image {width}x{height}")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    /// A reverse pass was requested without a recorded forward tape.
    #[error("no forward tape recorded; run a training-mode forward pass first")]
    NoForwardTape,

    /// A checkpoint file is malformed or inconsistent.
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    /// An architecture descriptor is invalid.
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
