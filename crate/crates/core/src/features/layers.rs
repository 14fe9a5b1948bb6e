//! Network layers with hand-written forward and reverse passes.
//!
//! Each layer exposes a `forward` that produces its output (and, where the
//! reverse pass needs saved state, a tape struct) and a `backward` that
//! consumes the output adjoint and returns the input adjoint, accumulating
//! parameter gradients in place. The reverse passes are exact adjoints of
//! the forward computations — the resize backward, for example, scatters
//! through the very same interpolation taps the forward gathered with — so
//! the composite network gradient matches finite differences to first order
//! with no hidden approximations.
//!
//! Convolutions are stride-1 with zero padding that preserves the spatial
//! size ("same" padding). Pooling is 2x2 max with stride 2. Resizing is
//! bilinear with half-pixel centre alignment and edge clamping.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

/// Accumulates `dst[y][x] += weight * src[y + dy][x + dx]` over all positions
/// where the shifted source index is in bounds. Both planes are `h` by `w`.
/// This one kernel implements both the convolution forward pass and its
/// input-adjoint (with the shift negated).
fn accumulate_shifted(
    dst: &mut [f64],
    src: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    weight: f64,
) {
    let y_lo = if dy < 0 { (-dy) as usize } else { 0 };
    let y_hi = if dy > 0 { h - dy as usize } else { h };
    let x_lo = if dx < 0 { (-dx) as usize } else { 0 };
    let x_hi = if dx > 0 { w - dx as usize } else { w };
    if x_lo >= x_hi {
        return;
    }
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let d_off = y * w;
        let s_off = (sy * w) as isize + dx;
        let d = &mut dst[d_off + x_lo..d_off + x_hi];
        let s_start = (s_off + x_lo as isize) as usize;
        let s = &src[s_start..s_start + d.len()];
        for (dv, sv) in d.iter_mut().zip(s.iter()) {
            *dv += weight * sv;
        }
    }
}

/// Returns `sum_{y,x} a[y][x] * b[y + dy][x + dx]` over in-bounds positions;
/// the weight-gradient reduction of the convolution.
fn dot_shifted(a: &[f64], b: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let y_lo = if dy < 0 { (-dy) as usize } else { 0 };
    let y_hi = if dy > 0 { h - dy as usize } else { h };
    let x_lo = if dx < 0 { (-dx) as usize } else { 0 };
    let x_hi = if dx > 0 { w - dx as usize } else { w };
    if x_lo >= x_hi {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y_lo..y_hi {
        let by = (y as isize + dy) as usize;
        let a_off = y * w;
        let b_start = (by * w) as isize + dx;
        let av = &a[a_off + x_lo..a_off + x_hi];
        let b_start = (b_start + x_lo as isize) as usize;
        let bv = &b[b_start..b_start + av.len()];
        for (x, y) in av.iter().zip(bv.iter()) {
            acc += x * y;
        }
    }
    acc
}

/// Stride-1 convolution with "same" zero padding. Kernel size is 1 or 3.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Weights in `[out][in][ky][kx]` order.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub weight_grad: Vec<f64>,
    pub bias_grad: Vec<f64>,
}

impl Conv2d {
    /// He-initialised convolution: weights drawn from a zero-mean normal
    /// with variance `2 / fan_in`, biases zero.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are used");
        let n_w = out_channels * in_channels * kernel * kernel;
        let std = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let weight = (0..n_w)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![0.0; out_channels],
            weight_grad: vec![0.0; n_w],
            bias_grad: vec![0.0; out_channels],
        }
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    #[inline]
    fn w_index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.in_channels + ci) * self.kernel + ky) * self.kernel + kx
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        let (nb, ci_n, h, w) = input.shape();
        assert_eq!(ci_n, self.in_channels, "convolution input channel mismatch");
        let mut out = Tensor::zeros(nb, self.out_channels, h, w);
        let k = self.kernel;
        let pad = self.pad();
        for n in 0..nb {
            for co in 0..self.out_channels {
                let bias = self.bias[co];
                out.plane_mut(n, co).iter_mut().for_each(|v| *v = bias);
                for ci in 0..self.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wgt = self.weight[self.w_index(co, ci, ky, kx)];
                            let src = input.plane(n, ci);
                            // Split borrow: the output plane belongs to `out`,
                            // the source plane to `input`, so this is safe and
                            // cheap; plane_mut only re-slices.
                            accumulate_shifted(
                                out.plane_mut(n, co),
                                src,
                                h,
                                w,
                                ky as isize - pad,
                                kx as isize - pad,
                                wgt,
                            );
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight and bias gradients and returns the input adjoint.
    /// `input` must be the tensor the matching forward pass consumed.
    pub fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Tensor {
        let (nb, _, h, w) = input.shape();
        assert_eq!(grad_out.channels(), self.out_channels);
        assert_eq!(grad_out.height(), h);
        assert_eq!(grad_out.width(), w);
        let k = self.kernel;
        let pad = self.pad();
        let mut grad_in = Tensor::zeros(nb, self.in_channels, h, w);
        for n in 0..nb {
            for co in 0..self.out_channels {
                let gy = grad_out.plane(n, co);
                self.bias_grad[co] += gy.iter().sum::<f64>();
                for ci in 0..self.in_channels {
                    let x = input.plane(n, ci);
                    for ky in 0..k {
                        for kx in 0..k {
                            let dy = ky as isize - pad;
                            let dx = kx as isize - pad;
                            let wi = self.w_index(co, ci, ky, kx);
                            self.weight_grad[wi] += dot_shifted(gy, x, h, w, dy, dx);
                            accumulate_shifted(
                                grad_in.plane_mut(n, ci),
                                gy,
                                h,
                                w,
                                -dy,
                                -dx,
                                self.weight[wi],
                            );
                        }
                    }
                }
            }
        }
        grad_in
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.iter_mut().for_each(|g| *g = 0.0);
        self.bias_grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Per-channel batch normalisation.
///
/// Training mode normalises with the statistics of the current batch
/// (biased variance over batch and spatial positions) and folds those
/// statistics into running estimates with the configured momentum;
/// evaluation mode normalises with the frozen running estimates. The
/// reverse pass differentiates through the batch statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub gamma_grad: Vec<f64>,
    pub beta_grad: Vec<f64>,
}

/// Saved state from a training-mode normalisation pass.
#[derive(Debug, Clone)]
pub struct BatchNormTape {
    /// The normalised activations (before scale and shift).
    pub normalized: Tensor,
    /// Reciprocal standard deviation per channel.
    pub inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        BatchNorm {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            epsilon,
            gamma_grad: vec![0.0; channels],
            beta_grad: vec![0.0; channels],
        }
    }

    pub fn forward_train(&mut self, input: &Tensor) -> (Tensor, BatchNormTape) {
        let (nb, c, h, w) = input.shape();
        assert_eq!(c, self.channels);
        let m = (nb * h * w) as f64;
        let mut out = Tensor::zeros(nb, c, h, w);
        let mut normalized = Tensor::zeros(nb, c, h, w);
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut mean = 0.0;
            for n in 0..nb {
                mean += input.plane(n, ch).iter().sum::<f64>();
            }
            mean /= m;
            let mut var = 0.0;
            for n in 0..nb {
                for &v in input.plane(n, ch) {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var /= m;
            let istd = 1.0 / (var + self.epsilon).sqrt();
            inv_std[ch] = istd;
            let gamma = self.gamma[ch];
            let beta = self.beta[ch];
            for n in 0..nb {
                let src = input.plane(n, ch);
                // Two destination planes in two tensors; copy via index pairs.
                let xhat = normalized.plane_mut(n, ch);
                for (dst, &v) in xhat.iter_mut().zip(src.iter()) {
                    *dst = (v - mean) * istd;
                }
                let y = out.plane_mut(n, ch);
                for (dst, &v) in y.iter_mut().zip(normalized.plane(n, ch).iter()) {
                    *dst = gamma * v + beta;
                }
            }
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var;
        }
        (out, BatchNormTape { normalized, inv_std })
    }

    pub fn forward_eval(&self, input: &Tensor) -> Tensor {
        let (nb, c, h, w) = input.shape();
        assert_eq!(c, self.channels);
        let mut out = Tensor::zeros(nb, c, h, w);
        for ch in 0..c {
            let istd = 1.0 / (self.running_var[ch] + self.epsilon).sqrt();
            let scale = self.gamma[ch] * istd;
            let shift = self.beta[ch] - self.running_mean[ch] * scale;
            for n in 0..nb {
                let src = input.plane(n, ch);
                let dst = out.plane_mut(n, ch);
                for (d, &v) in dst.iter_mut().zip(src.iter()) {
                    *d = scale * v + shift;
                }
            }
        }
        out
    }

    /// Training-mode reverse pass through the batch statistics.
    pub fn backward(&mut self, tape: &BatchNormTape, grad_out: &Tensor) -> Tensor {
        let (nb, c, h, w) = grad_out.shape();
        assert_eq!(c, self.channels);
        let m = (nb * h * w) as f64;
        let mut grad_in = Tensor::zeros(nb, c, h, w);
        for ch in 0..c {
            let mut sum_gy = 0.0;
            let mut sum_gy_xhat = 0.0;
            for n in 0..nb {
                let gy = grad_out.plane(n, ch);
                let xhat = tape.normalized.plane(n, ch);
                for (&g, &x) in gy.iter().zip(xhat.iter()) {
                    sum_gy += g;
                    sum_gy_xhat += g * x;
                }
            }
            self.beta_grad[ch] += sum_gy;
            self.gamma_grad[ch] += sum_gy_xhat;
            let scale = self.gamma[ch] * tape.inv_std[ch];
            let mean_gy = sum_gy / m;
            let mean_gy_xhat = sum_gy_xhat / m;
            for n in 0..nb {
                let gy = grad_out.plane(n, ch);
                let xhat = tape.normalized.plane(n, ch);
                let gx = grad_in.plane_mut(n, ch);
                for ((d, &g), &x) in gx.iter_mut().zip(gy.iter()).zip(xhat.iter()) {
                    *d = scale * (g - mean_gy - x * mean_gy_xhat);
                }
            }
        }
        grad_in
    }

    pub fn zero_grad(&mut self) {
        self.gamma_grad.iter_mut().for_each(|g| *g = 0.0);
        self.beta_grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Rectified linear unit.
pub fn relu(input: &Tensor) -> Tensor {
    let (nb, c, h, w) = input.shape();
    let mut out = Tensor::zeros(nb, c, h, w);
    for (d, &v) in out.data.iter_mut().zip(input.data.iter()) {
        *d = if v > 0.0 { v } else { 0.0 };
    }
    out
}

/// Reverse pass of [`relu`], gated on the forward *output* (positive output
/// means the unit was active).
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    assert_eq!(output.shape(), grad_out.shape());
    let (nb, c, h, w) = output.shape();
    let mut grad_in = Tensor::zeros(nb, c, h, w);
    for ((d, &y), &g) in grad_in
        .data
        .iter_mut()
        .zip(output.data.iter())
        .zip(grad_out.data.iter())
    {
        *d = if y > 0.0 { g } else { 0.0 };
    }
    grad_in
}

/// Saved argmax indices from a pooling pass, flat within each input plane.
#[derive(Debug, Clone)]
pub struct PoolTape {
    pub argmax: Vec<usize>,
    pub in_height: usize,
    pub in_width: usize,
}

/// 2x2 max pooling with stride 2. Spatial dimensions must be even.
/// Ties resolve to the first maximum in row-major scan order.
pub fn max_pool(input: &Tensor) -> (Tensor, PoolTape) {
    let (nb, c, h, w) = input.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling requires even spatial size");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(nb, c, oh, ow);
    let mut argmax = vec![0usize; nb * c * oh * ow];
    let mut cursor = 0;
    for n in 0..nb {
        for ch in 0..c {
            let src = input.plane(n, ch);
            let dst = out.plane_mut(n, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (2 * oy) * w + 2 * ox;
                    let candidates = [base, base + 1, base + w, base + w + 1];
                    let mut best = candidates[0];
                    let mut best_v = src[best];
                    for &idx in &candidates[1..] {
                        if src[idx] > best_v {
                            best_v = src[idx];
                            best = idx;
                        }
                    }
                    dst[oy * ow + ox] = best_v;
                    argmax[cursor] = best;
                    cursor += 1;
                }
            }
        }
    }
    (
        out,
        PoolTape {
            argmax,
            in_height: h,
            in_width: w,
        },
    )
}

/// Reverse pass of [`max_pool`]: scatters each output adjoint onto the
/// position that won the forward maximum.
pub fn max_pool_backward(tape: &PoolTape, grad_out: &Tensor) -> Tensor {
    let (nb, c, oh, ow) = grad_out.shape();
    assert_eq!(oh * 2, tape.in_height);
    assert_eq!(ow * 2, tape.in_width);
    let mut grad_in = Tensor::zeros(nb, c, tape.in_height, tape.in_width);
    let mut cursor = 0;
    for n in 0..nb {
        for ch in 0..c {
            let gy = grad_out.plane(n, ch);
            let gx = grad_in.plane_mut(n, ch);
            for &g in gy.iter() {
                gx[tape.argmax[cursor]] += g;
                cursor += 1;
            }
        }
    }
    grad_in
}

/// Precomputed interpolation taps for a separable bilinear resize:
/// for every output index, the two source indices and the fractional
/// weight of the second one.
#[derive(Debug, Clone)]
pub struct ResizePlan {
    pub in_height: usize,
    pub in_width: usize,
    pub out_height: usize,
    pub out_width: usize,
    taps_y: Vec<(usize, usize, f64)>,
    taps_x: Vec<(usize, usize, f64)>,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    assert!(n_in > 0 && n_out > 0);
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            // Half-pixel centre alignment, clamped at the edges.
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Builds the tap tables for resizing `in` to `out`. An identity resize
/// produces exact pass-through taps.
pub fn resize_plan(in_height: usize, in_width: usize, out_height: usize, out_width: usize) -> ResizePlan {
    ResizePlan {
        in_height,
        in_width,
        out_height,
        out_width,
        taps_y: axis_taps(in_height, out_height),
        taps_x: axis_taps(in_width, out_width),
    }
}

/// Bilinear resize of every plane according to the plan.
pub fn resize(input: &Tensor, plan: &ResizePlan) -> Tensor {
    let (nb, c, h, w) = input.shape();
    assert_eq!(h, plan.in_height);
    assert_eq!(w, plan.in_width);
    let mut out = Tensor::zeros(nb, c, plan.out_height, plan.out_width);
    for n in 0..nb {
        for ch in 0..c {
            let src = input.plane(n, ch);
            let dst = out.plane_mut(n, ch);
            for (oy, &(y0, y1, fy)) in plan.taps_y.iter().enumerate() {
                let row0 = y0 * w;
                let row1 = y1 * w;
                let d_off = oy * plan.out_width;
                for (ox, &(x0, x1, fx)) in plan.taps_x.iter().enumerate() {
                    let top = (1.0 - fx) * src[row0 + x0] + fx * src[row0 + x1];
                    let bot = (1.0 - fx) * src[row1 + x0] + fx * src[row1 + x1];
                    dst[d_off + ox] = (1.0 - fy) * top + fy * bot;
                }
            }
        }
    }
    out
}

/// Exact adjoint of [`resize`]: scatters output adjoints back through the
/// same taps.
pub fn resize_backward(grad_out: &Tensor, plan: &ResizePlan) -> Tensor {
    let (nb, c, oh, ow) = grad_out.shape();
    assert_eq!(oh, plan.out_height);
    assert_eq!(ow, plan.out_width);
    let mut grad_in = Tensor::zeros(nb, c, plan.in_height, plan.in_width);
    let w = plan.in_width;
    for n in 0..nb {
        for ch in 0..c {
            let gy = grad_out.plane(n, ch);
            let gx = grad_in.plane_mut(n, ch);
            for (oy, &(y0, y1, fy)) in plan.taps_y.iter().enumerate() {
                let row0 = y0 * w;
                let row1 = y1 * w;
                let g_off = oy * ow;
                for (ox, &(x0, x1, fx)) in plan.taps_x.iter().enumerate() {
                    let g = gy[g_off + ox];
                    gx[row0 + x0] += (1.0 - fy) * (1.0 - fx) * g;
                    gx[row0 + x1] += (1.0 - fy) * fx * g;
                    gx[row1 + x0] += fy * (1.0 - fx) * g;
                    gx[row1 + x1] += fy * fx * g;
                }
            }
        }
    }
    grad_in
}

/// Concatenates tensors along the channel axis. Batch and spatial shapes
/// must agree.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let (nb, _, h, w) = parts[0].shape();
    let total_c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = Tensor::zeros(nb, total_c, h, w);
    for n in 0..nb {
        let mut c_off = 0;
        for part in parts {
            assert_eq!(part.batch(), nb);
            assert_eq!(part.height(), h);
            assert_eq!(part.width(), w);
            for ch in 0..part.channels() {
                out.plane_mut(n, c_off + ch).copy_from_slice(part.plane(n, ch));
            }
            c_off += part.channels();
        }
    }
    out
}

/// Splits a channel-axis adjoint back into the contributions of the
/// concatenated parts.
pub fn split_channels(grad: &Tensor, sizes: &[usize]) -> Vec<Tensor> {
    let (nb, c, h, w) = grad.shape();
    assert_eq!(sizes.iter().sum::<usize>(), c, "split sizes must cover all channels");
    let mut parts = Vec::with_capacity(sizes.len());
    let mut c_off = 0;
    for &size in sizes {
        let mut part = Tensor::zeros(nb, size, h, w);
        for n in 0..nb {
            for ch in 0..size {
                part.plane_mut(n, ch).copy_from_slice(grad.plane(n, c_off + ch));
            }
        }
        c_off += size;
        parts.push(part);
    }
    parts
}

/// The repeated unit of the encoder and decoder: two rounds of
/// 3x3 convolution, batch normalisation, and ReLU.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

/// Saved activations for one [`DoubleConv`] reverse pass.
#[derive(Debug, Clone)]
pub struct DoubleConvTape {
    pub input: Tensor,
    pub bn1: BatchNormTape,
    pub act1: Tensor,
    pub bn2: BatchNormTape,
    pub act2: Tensor,
}

impl DoubleConv {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        momentum: f64,
        epsilon: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DoubleConv {
            conv1: Conv2d::new(in_channels, out_channels, 3, rng),
            bn1: BatchNorm::new(out_channels, momentum, epsilon),
            conv2: Conv2d::new(out_channels, out_channels, 3, rng),
            bn2: BatchNorm::new(out_channels, momentum, epsilon),
        }
    }

    /// Training-mode forward pass; returns the block output and the tape
    /// required by [`DoubleConv::backward`]. The input tensor is moved into
    /// the tape rather than cloned.
    pub fn forward_train(&mut self, input: Tensor) -> (Tensor, DoubleConvTape) {
        let z1 = self.conv1.forward(&input);
        let (b1, bn1_tape) = self.bn1.forward_train(&z1);
        let act1 = relu(&b1);
        let z2 = self.conv2.forward(&act1);
        let (b2, bn2_tape) = self.bn2.forward_train(&z2);
        let act2 = relu(&b2);
        let out = act2.clone();
        (
            out,
            DoubleConvTape {
                input,
                bn1: bn1_tape,
                act1,
                bn2: bn2_tape,
                act2,
            },
        )
    }

    /// Inference forward pass with frozen normalisation statistics.
    pub fn forward_eval(&self, input: &Tensor) -> Tensor {
        let act1 = relu(&self.bn1.forward_eval(&self.conv1.forward(input)));
        relu(&self.bn2.forward_eval(&self.conv2.forward(&act1)))
    }

    /// Accumulates parameter gradients and returns the input adjoint.
    pub fn backward(&mut self, tape: &DoubleConvTape, grad_out: &Tensor) -> Tensor {
        let g_b2 = relu_backward(&tape.act2, grad_out);
        let g_z2 = self.bn2.backward(&tape.bn2, &g_b2);
        let g_act1 = self.conv2.backward(&tape.act1, &g_z2);
        let g_b1 = relu_backward(&tape.act1, &g_act1);
        let g_z1 = self.bn1.backward(&tape.bn1, &g_b1);
        self.conv1.backward(&tape.input, &g_z1)
    }

    pub fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.bn1.zero_grad();
        self.conv2.zero_grad();
        self.bn2.zero_grad();
    }
}
