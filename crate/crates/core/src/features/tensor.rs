//! Dense rank-4 activation storage for the feature network.
//!
//! Every activation and adjoint in the network is a batch of channel planes
//! laid out contiguously in batch-channel-row-column order. The network is
//! small enough that plain `Vec<f64>` storage with explicit indexing is both
//! the simplest and the fastest option: the hot loops in `layers` operate on
//! whole rows at a time, so the layout here is chosen to make row slices
//! contiguous.
//!
//! All arithmetic is double precision. The training gradients are verified
//! against central finite differences at tight tolerances, which single
//! precision cannot support.

/// A batch of multi-channel images: `batch * channels` planes of
/// `height * width` values, row-major within each plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Allocates a zero-filled tensor of the given shape.
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            batch,
            channels,
            height,
            width,
            data: vec![0.0; batch * channels * height * width],
        }
    }

    /// Wraps an existing buffer. The buffer length must match the shape.
    pub fn from_data(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Self {
        assert_eq!(
            data.len(),
            batch * channels * height * width,
            "tensor data length does not match shape"
        );
        Tensor {
            batch,
            channels,
            height,
            width,
            data,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Shape as `(batch, channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.height, self.width)
    }

    /// Number of values in one channel plane.
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    fn plane_offset(&self, n: usize, c: usize) -> usize {
        debug_assert!(n < self.batch && c < self.channels);
        (n * self.channels + c) * self.plane_len()
    }

    /// One channel plane of one batch element, row-major.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let off = self.plane_offset(n, c);
        &self.data[off..off + self.plane_len()]
    }

    /// Mutable channel plane.
    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let off = self.plane_offset(n, c);
        let len = self.plane_len();
        &mut self.data[off..off + len]
    }

    /// Value at `(n, c, row, col)`. Convenience accessor for tests and
    /// low-rate code paths; hot loops index planes directly.
    #[inline]
    pub fn at(&self, n: usize, c: usize, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.height && col < self.width);
        self.data[self.plane_offset(n, c) + row * self.width + col]
    }

    /// Mutable value accessor, mirroring [`Tensor::at`].
    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, row: usize, col: usize) -> &mut f64 {
        debug_assert!(row < self.height && col < self.width);
        let idx = self.plane_offset(n, c) + row * self.width + col;
        &mut self.data[idx]
    }

    /// Element-wise accumulation: `self += other`. Shapes must match.
    pub fn add_in_place(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "tensor shape mismatch in add");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// Fills the tensor with a constant.
    pub fn fill(&mut self, value: f64) {
        for v in self.data.iter_mut() {
            *v = value;
        }
    }
}
