//! The feature network: a small encoder-decoder with dense output heads.
//!
//! The network maps a single-channel Cartesian radar image to three
//! input-sized maps:
//!
//! * a one-channel **detector** map of raw keypoint scores,
//! * a three-channel **weight-score** map parameterising per-point inverse
//!   measurement covariances, and
//! * a **descriptor** map formed by resizing every encoder stage's output
//!   back to the input size and concatenating along channels, so the
//!   descriptor dimension is the sum of the encoder channel counts.
//!
//! The encoder applies `depth` double-convolution blocks, halving the
//! spatial size after each with 2x2 max pooling; the decoder mirrors it
//! with bilinear upsampling and skip concatenation, and two 1x1
//! convolutions head the final full-resolution feature map. Input sizes
//! must therefore be divisible by `2^depth`.
//!
//! A training-mode forward pass records every activation needed by the
//! reverse pass on an internal tape; [`FeatureModel::backprop`] consumes
//! that tape exactly once. Parameters live in the layers but are exposed
//! as one flat vector (fixed traversal order) for the optimiser, for
//! checkpointing, and for finite-difference verification.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat_channels, max_pool, max_pool_backward, resize, resize_backward, resize_plan,
    split_channels, Conv2d, DoubleConv, DoubleConvTape, PoolTape,
};
use super::tensor::Tensor;
use super::FeatureError;

/// Hyperparameters that fix the network shape. Serialised verbatim into
/// checkpoints so a saved model can be rebuilt without external context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    /// Input channels; radar images are single-channel.
    pub input_channels: usize,
    /// Output channels of each encoder block, shallow to deep.
    pub encoder_channels: Vec<usize>,
    /// Output channels of each decoder block, deep to shallow. Must have
    /// the same length as `encoder_channels`.
    pub decoder_channels: Vec<usize>,
    /// Side length of the square cells used for keypoint extraction.
    pub cell_size: usize,
    /// Softmax temperature of the descriptor matcher.
    pub temperature: f64,
    /// Momentum of the batch-normalisation running statistics.
    pub bn_momentum: f64,
    /// Variance floor of the batch normalisation.
    pub bn_epsilon: f64,
}

impl Default for Arch {
    /// Desk-scale default: two encoder blocks (8 and 16 channels), a
    /// mirrored decoder, 24-dimensional descriptors, 16-pixel cells.
    fn default() -> Self {
        Arch {
            input_channels: 1,
            encoder_channels: vec![8, 16],
            decoder_channels: vec![16, 8],
            cell_size: 16,
            temperature: 100.0,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

impl Arch {
    /// Number of encoder (= decoder) blocks.
    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial divisibility the input must satisfy: `2^depth`.
    pub fn downsample_factor(&self) -> usize {
        1 << self.depth()
    }

    /// Descriptor dimension: the sum of all encoder channel counts.
    pub fn descriptor_dim(&self) -> usize {
        self.encoder_channels.iter().sum()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.input_channels == 0 {
            return Err(FeatureError::InvalidArchitecture(
                "input_channels must be positive".into(),
            ));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(FeatureError::InvalidArchitecture(
                "encoder_channels must be non-empty and positive".into(),
            ));
        }
        if self.decoder_channels.len() != self.encoder_channels.len()
            || self.decoder_channels.iter().any(|&c| c == 0)
        {
            return Err(FeatureError::InvalidArchitecture(
                "decoder_channels must match encoder depth and be positive".into(),
            ));
        }
        if self.cell_size == 0 {
            return Err(FeatureError::InvalidArchitecture(
                "cell_size must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(FeatureError::InvalidArchitecture(
                "temperature must be positive and finite".into(),
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(FeatureError::InvalidArchitecture(
                "bn_momentum must lie in (0, 1]".into(),
            ));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(FeatureError::InvalidArchitecture(
                "bn_epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The three dense output maps of one forward pass.
#[derive(Debug, Clone)]
pub struct NetOutputs {
    /// Raw keypoint scores, one channel.
    pub detector: Tensor,
    /// Weight scores `(d1, d2, d3)`, three channels.
    pub weights: Tensor,
    /// Descriptor map, `descriptor_dim` channels.
    pub descriptors: Tensor,
}

/// Loss adjoints with respect to the three output maps. `None` means the
/// loss does not touch that output (an exact zero adjoint).
#[derive(Debug, Clone)]
pub struct OutputAdjoints {
    pub detector: Option<Tensor>,
    pub weights: Option<Tensor>,
    pub descriptors: Option<Tensor>,
}

/// Everything [`FeatureModel::backprop`] needs from the forward pass.
struct ModelTape {
    encoder: Vec<DoubleConvTape>,
    pools: Vec<PoolTape>,
    decoder: Vec<DoubleConvTape>,
    /// Channels of the upsampled (non-skip) part of each decoder input.
    decoder_up_channels: Vec<usize>,
    /// Spatial size of each encoder output, shallow to deep.
    encoder_sizes: Vec<(usize, usize)>,
    /// Input spatial size.
    input_size: (usize, usize),
}

/// The trainable feature model: layers plus the architecture that built them.
pub struct FeatureModel {
    pub arch: Arch,
    encoder: Vec<DoubleConv>,
    decoder: Vec<DoubleConv>,
    detector_head: Conv2d,
    weight_head: Conv2d,
    tape: Option<ModelTape>,
}

impl FeatureModel {
    /// Builds a freshly initialised model. Weights are He-normal from the
    /// seeded generator, so equal seeds give bit-identical models.
    pub fn new(arch: Arch, seed: u64) -> Result<Self, FeatureError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = arch.depth();
        let mut encoder = Vec::with_capacity(depth);
        let mut in_c = arch.input_channels;
        for &out_c in &arch.encoder_channels {
            encoder.push(DoubleConv::new(in_c, out_c, arch.bn_momentum, arch.bn_epsilon, &mut rng));
            in_c = out_c;
        }
        let mut decoder = Vec::with_capacity(depth);
        let mut prev_c = *arch.encoder_channels.last().unwrap();
        for (i, &out_c) in arch.decoder_channels.iter().enumerate() {
            let skip_c = arch.encoder_channels[depth - 1 - i];
            decoder.push(DoubleConv::new(
                prev_c + skip_c,
                out_c,
                arch.bn_momentum,
                arch.bn_epsilon,
                &mut rng,
            ));
            prev_c = out_c;
        }
        let detector_head = Conv2d::new(prev_c, 1, 1, &mut rng);
        let weight_head = Conv2d::new(prev_c, 3, 1, &mut rng);
        Ok(FeatureModel {
            arch,
            encoder,
            decoder,
            detector_head,
            weight_head,
            tape: None,
        })
    }

    fn check_input(&self, input: &Tensor) -> Result<(), FeatureError> {
        let (_, c, h, w) = input.shape();
        assert_eq!(c, self.arch.input_channels, "input channel mismatch");
        let factor = self.arch.downsample_factor();
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(FeatureError::SizeIndivisible {
                height: h,
                width: w,
                factor,
            });
        }
        Ok(())
    }

    /// Runs the network. In training mode the pass records a tape for one
    /// subsequent [`FeatureModel::backprop`] call and the normalisation
    /// layers use (and update) batch statistics; in evaluation mode the
    /// running statistics are frozen and no tape is kept.
    pub fn forward(&mut self, input: &Tensor, training: bool) -> Result<NetOutputs, FeatureError> {
        self.check_input(input)?;
        if training {
            self.forward_train(input)
        } else {
            self.tape = None;
            Ok(self.forward_eval(input))
        }
    }

    fn forward_train(&mut self, input: &Tensor) -> Result<NetOutputs, FeatureError> {
        let depth = self.arch.depth();
        let (_, _, in_h, in_w) = input.shape();
        let mut enc_tapes = Vec::with_capacity(depth);
        let mut pools = Vec::with_capacity(depth);
        let mut enc_sizes = Vec::with_capacity(depth);
        let mut cur = input.clone();
        for block in self.encoder.iter_mut() {
            let (out, tape) = block.forward_train(cur);
            enc_sizes.push((out.height(), out.width()));
            let (pooled, pool_tape) = max_pool(&out);
            enc_tapes.push(tape);
            pools.push(pool_tape);
            cur = pooled;
        }
        let mut dec_tapes = Vec::with_capacity(depth);
        let mut up_channels = Vec::with_capacity(depth);
        for (i, block) in self.decoder.iter_mut().enumerate() {
            let skip_idx = depth - 1 - i;
            // The skip activation is the encoder block's saved output.
            let skip = &enc_tapes[skip_idx].act2;
            let plan = resize_plan(cur.height(), cur.width(), skip.height(), skip.width());
            let up = resize(&cur, &plan);
            up_channels.push(up.channels());
            let cat = concat_channels(&[&up, skip]);
            let (out, tape) = block.forward_train(cat);
            dec_tapes.push(tape);
            cur = out;
        }
        let detector = self.detector_head.forward(&cur);
        let weights = self.weight_head.forward(&cur);
        let descriptors = self.descriptor_map(
            &enc_tapes.iter().map(|t| &t.act2).collect::<Vec<_>>(),
            in_h,
            in_w,
        );
        self.tape = Some(ModelTape {
            encoder: enc_tapes,
            pools,
            decoder: dec_tapes,
            decoder_up_channels: up_channels,
            encoder_sizes: enc_sizes,
            input_size: (in_h, in_w),
        });
        Ok(NetOutputs {
            detector,
            weights,
            descriptors,
        })
    }

    fn forward_eval(&self, input: &Tensor) -> NetOutputs {
        let depth = self.arch.depth();
        let (_, _, in_h, in_w) = input.shape();
        let mut enc_outs = Vec::with_capacity(depth);
        let mut cur = input.clone();
        for block in &self.encoder {
            let out = block.forward_eval(&cur);
            let (pooled, _) = max_pool(&out);
            enc_outs.push(out);
            cur = pooled;
        }
        for (i, block) in self.decoder.iter().enumerate() {
            let skip = &enc_outs[depth - 1 - i];
            let plan = resize_plan(cur.height(), cur.width(), skip.height(), skip.width());
            let up = resize(&cur, &plan);
            let cat = concat_channels(&[&up, skip]);
            cur = block.forward_eval(&cat);
        }
        let detector = self.detector_head.forward(&cur);
        let weights = self.weight_head.forward(&cur);
        let descriptors =
            self.descriptor_map(&enc_outs.iter().collect::<Vec<_>>(), in_h, in_w);
        NetOutputs {
            detector,
            weights,
            descriptors,
        }
    }

    /// Resizes every encoder output to the input size and concatenates.
    fn descriptor_map(&self, enc_outs: &[&Tensor], in_h: usize, in_w: usize) -> Tensor {
        let resized: Vec<Tensor> = enc_outs
            .iter()
            .map(|e| {
                let plan = resize_plan(e.height(), e.width(), in_h, in_w);
                resize(e, &plan)
            })
            .collect();
        concat_channels(&resized.iter().collect::<Vec<_>>())
    }

    /// Reverse pass. Accumulates parameter gradients for the loss whose
    /// output adjoints are given, consuming the tape of the immediately
    /// preceding training-mode forward pass, and returns the accumulated
    /// flat gradient vector. Missing adjoints are treated as exact zeros,
    /// so parameters feeding only untouched outputs keep zero gradients.
    pub fn backprop(&mut self, adjoints: &OutputAdjoints) -> Result<Vec<f64>, FeatureError> {
        let tape = self.tape.take().ok_or(FeatureError::NoForwardTape)?;
        let depth = self.arch.depth();
        let head_input = &tape.decoder.last().expect("decoder is non-empty").act2;
        let (nb, head_c, h, w) = head_input.shape();

        // Head adjoints meet at the final decoder activation.
        let mut g_head = Tensor::zeros(nb, head_c, h, w);
        if let Some(g_det) = &adjoints.detector {
            g_head.add_in_place(&self.detector_head.backward(head_input, g_det));
        }
        if let Some(g_wgt) = &adjoints.weights {
            g_head.add_in_place(&self.weight_head.backward(head_input, g_wgt));
        }

        // Descriptor adjoint feeds the encoder outputs directly.
        let mut g_enc: Vec<Tensor> = tape
            .encoder
            .iter()
            .map(|t| {
                let (nb, c, eh, ew) = t.act2.shape();
                Tensor::zeros(nb, c, eh, ew)
            })
            .collect();
        if let Some(g_desc) = &adjoints.descriptors {
            let parts = split_channels(g_desc, &self.arch.encoder_channels);
            for (i, part) in parts.iter().enumerate() {
                let (eh, ew) = tape.encoder_sizes[i];
                let plan = resize_plan(eh, ew, tape.input_size.0, tape.input_size.1);
                g_enc[i].add_in_place(&resize_backward(part, &plan));
            }
        }

        // Decoder chain in reverse, splitting skip adjoints back out.
        let mut g_cur = g_head;
        for i in (0..depth).rev() {
            let skip_idx = depth - 1 - i;
            let g_cat = self.decoder[i].backward(&tape.decoder[i], &g_cur);
            let skip_c = self.arch.encoder_channels[skip_idx];
            let parts = split_channels(&g_cat, &[tape.decoder_up_channels[i], skip_c]);
            g_enc[skip_idx].add_in_place(&parts[1]);
            let up = &parts[0];
            let (src_h, src_w) = if i == 0 {
                // Below the deepest skip sits the pooled bottom feature.
                let (eh, ew) = tape.encoder_sizes[depth - 1];
                (eh / 2, ew / 2)
            } else {
                // The previous decoder block's output, at its skip's size.
                tape.encoder_sizes[depth - i]
            };
            let plan = resize_plan(src_h, src_w, up.height(), up.width());
            g_cur = resize_backward(up, &plan);
        }

        // The decoder input was the pooled deepest encoder output.
        g_enc[depth - 1].add_in_place(&max_pool_backward(&tape.pools[depth - 1], &g_cur));

        // Encoder chain in reverse; each block's input adjoint flows through
        // the preceding pool onto the shallower encoder output.
        for i in (0..depth).rev() {
            let g_in = self.encoder[i].backward(&tape.encoder[i], &g_enc[i]);
            if i > 0 {
                g_enc[i - 1].add_in_place(&max_pool_backward(&tape.pools[i - 1], &g_in));
            }
        }
        Ok(self.grads_flat())
    }

    pub fn zero_grad(&mut self) {
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            b.zero_grad();
        }
        self.detector_head.zero_grad();
        self.weight_head.zero_grad();
    }

    /// Drops any recorded tape without running a reverse pass.
    pub fn clear_tape(&mut self) {
        self.tape = None;
    }

    /// True if a training-mode forward pass has recorded an unconsumed tape.
    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    fn double_convs(&self) -> impl Iterator<Item = &DoubleConv> {
        self.encoder.iter().chain(self.decoder.iter())
    }

    fn double_convs_mut(&mut self) -> impl Iterator<Item = &mut DoubleConv> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    /// Trainable parameter count.
    pub fn n_params(&self) -> usize {
        let conv = |c: &Conv2d| c.weight.len() + c.bias.len();
        let block = |b: &DoubleConv| {
            conv(&b.conv1) + 2 * b.bn1.channels + conv(&b.conv2) + 2 * b.bn2.channels
        };
        self.double_convs().map(block).sum::<usize>()
            + conv(&self.detector_head)
            + conv(&self.weight_head)
    }

    /// Flattens all trainable parameters in canonical traversal order:
    /// encoder blocks shallow to deep, decoder blocks deep to shallow,
    /// detector head, weight head; within each block conv1 weights, conv1
    /// bias, bn1 gamma, bn1 beta, then the same for the second round.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for b in self.double_convs() {
            out.extend_from_slice(&b.conv1.weight);
            out.extend_from_slice(&b.conv1.bias);
            out.extend_from_slice(&b.bn1.gamma);
            out.extend_from_slice(&b.bn1.beta);
            out.extend_from_slice(&b.conv2.weight);
            out.extend_from_slice(&b.conv2.bias);
            out.extend_from_slice(&b.bn2.gamma);
            out.extend_from_slice(&b.bn2.beta);
        }
        for head in [&self.detector_head, &self.weight_head] {
            out.extend_from_slice(&head.weight);
            out.extend_from_slice(&head.bias);
        }
        out
    }

    /// Gradients in the same order as [`FeatureModel::params_flat`].
    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for b in self.double_convs() {
            out.extend_from_slice(&b.conv1.weight_grad);
            out.extend_from_slice(&b.conv1.bias_grad);
            out.extend_from_slice(&b.bn1.gamma_grad);
            out.extend_from_slice(&b.bn1.beta_grad);
            out.extend_from_slice(&b.conv2.weight_grad);
            out.extend_from_slice(&b.conv2.bias_grad);
            out.extend_from_slice(&b.bn2.gamma_grad);
            out.extend_from_slice(&b.bn2.beta_grad);
        }
        for head in [&self.detector_head, &self.weight_head] {
            out.extend_from_slice(&head.weight_grad);
            out.extend_from_slice(&head.bias_grad);
        }
        out
    }

    /// Writes a flat vector back into the layers. The length must match
    /// [`FeatureModel::n_params`].
    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<(), FeatureError> {
        if params.len() != self.n_params() {
            return Err(FeatureError::InvalidArchitecture(format!(
                "parameter vector has {} entries, model needs {}",
                params.len(),
                self.n_params()
            )));
        }
        let mut pos = 0;
        let take = |dst: &mut [f64], pos: &mut usize| {
            dst.copy_from_slice(&params[*pos..*pos + dst.len()]);
            *pos += dst.len();
        };
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            take(&mut b.conv1.weight, &mut pos);
            take(&mut b.conv1.bias, &mut pos);
            take(&mut b.bn1.gamma, &mut pos);
            take(&mut b.bn1.beta, &mut pos);
            take(&mut b.conv2.weight, &mut pos);
            take(&mut b.conv2.bias, &mut pos);
            take(&mut b.bn2.gamma, &mut pos);
            take(&mut b.bn2.beta, &mut pos);
        }
        for head in [&mut self.detector_head, &mut self.weight_head] {
            take(&mut head.weight, &mut pos);
            take(&mut head.bias, &mut pos);
        }
        debug_assert_eq!(pos, params.len());
        Ok(())
    }

    /// Number of running-statistic values (normalisation means and
    /// variances); stored in checkpoints after the trainable parameters.
    pub fn n_running(&self) -> usize {
        self.double_convs()
            .map(|b| 2 * b.bn1.channels + 2 * b.bn2.channels)
            .sum()
    }

    /// Running statistics in canonical order: per block, bn1 mean, bn1
    /// variance, bn2 mean, bn2 variance.
    pub fn running_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_running());
        for b in self.double_convs() {
            out.extend_from_slice(&b.bn1.running_mean);
            out.extend_from_slice(&b.bn1.running_var);
            out.extend_from_slice(&b.bn2.running_mean);
            out.extend_from_slice(&b.bn2.running_var);
        }
        out
    }

    pub fn set_running_flat(&mut self, values: &[f64]) -> Result<(), FeatureError> {
        if values.len() != self.n_running() {
            return Err(FeatureError::InvalidArchitecture(format!(
                "running-statistics vector has {} entries, model needs {}",
                values.len(),
                self.n_running()
            )));
        }
        let mut pos = 0;
        for b in self.double_convs_mut() {
            for dst in [
                &mut b.bn1.running_mean,
                &mut b.bn1.running_var,
                &mut b.bn2.running_mean,
                &mut b.bn2.running_var,
            ] {
                let len = dst.len();
                dst.copy_from_slice(&values[pos..pos + len]);
                pos += len;
            }
        }
        debug_assert_eq!(pos, values.len());
        Ok(())
    }
}
