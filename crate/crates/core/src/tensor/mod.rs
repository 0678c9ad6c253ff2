//! Dense `f32` tensors and the numerical kernels the network is built from.
//!
//! Feature maps are channels-first. A rank-3 tensor is one image `(C, H, W)`;
//! a rank-4 tensor is a batch `(N, C, H, W)`. Every kernel in this module is a
//! pure function of its inputs (batch-norm training is the one exception: it
//! also advances the running statistics it is handed).

mod activation;
mod conv;
mod loss;
mod norm;

pub use activation::{
    global_avg_pool, global_avg_pool_backward, global_avg_pool_batch, relu, relu_backward,
    relu_in_place, softmax, softmax_backward,
};
pub use conv::{conv2d_dilated, conv2d_dilated_backward, conv2d_dilated_with, ConvGrads, ConvParams};
pub(crate) use conv::conv2d_backward_parts;
pub use loss::{categorical_cross_entropy, softmax_cross_entropy_grad, PROB_FLOOR};
pub use norm::{
    batch_norm, batch_norm_backward, batch_norm_infer, batch_norm_train, BatchNorm, BatchStats,
    NormGrads, NormMode, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid dims {dims:?}: every extent must be >= 1")]
    InvalidDims { dims: Vec<usize> },
    #[error("dims {dims:?} hold {expected} elements but {actual} values were given")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("expected a tensor of rank {expected}, got rank {actual}")]
    Rank { expected: String, actual: usize },
    #[error("channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("kernel must be square with an odd size for same padding, got {kh}x{kw}")]
    EvenKernel { kh: usize, kw: usize },
    #[error("dilation must be >= 1, got {0}")]
    InvalidDilation(usize),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("vector length mismatch: expected {expected}, got {actual}")]
    VectorLength { expected: usize, actual: usize },
    #[error("empty vector")]
    EmptyVector,
    #[error("epsilon must be finite and >= 0, got {0}")]
    InvalidEpsilon(f32),
}

/// Execution mode for kernels that can split work across threads.
///
/// `Deterministic` partitions work on boundaries that depend only on the
/// tensor shape, so the result is bit-identical for any thread count.
/// `Fast` sizes partitions by the current pool width; results agree with
/// deterministic mode to within 1e-5 but not necessarily bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Deterministic,
    Fast,
}

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidDims { dims });
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    /// Zero tensor. Panics if any extent is zero.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f32) -> Self {
        assert!(
            !dims.is_empty() && dims.iter().all(|&d| d > 0),
            "invalid tensor dims {dims:?}"
        );
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(C, H, W)` of a rank-3 tensor, or of each image in a rank-4 batch.
    pub fn chw(&self) -> Result<(usize, usize, usize), TensorError> {
        match self.dims.as_slice() {
            [c, h, w] | [_, c, h, w] => Ok((*c, *h, *w)),
            _ => Err(TensorError::Rank {
                expected: "3 or 4".into(),
                actual: self.rank(),
            }),
        }
    }

    /// Number of images: the leading extent of a rank-4 tensor, 1 otherwise.
    pub fn batch_len(&self) -> usize {
        if self.rank() == 4 {
            self.dims[0]
        } else {
            1
        }
    }

    /// Flat slice of image `n` in a rank-3 or rank-4 tensor.
    pub fn image(&self, n: usize) -> &[f32] {
        let per = self.data.len() / self.batch_len();
        &self.data[n * per..(n + 1) * per]
    }

    fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        let [ch, h, w] = self.dims[..] else {
            panic!("element access needs a rank-3 tensor, dims are {:?}", self.dims)
        };
        assert!(
            c < ch && y < h && x < w,
            "index ({c}, {y}, {x}) out of range for dims {:?}",
            self.dims
        );
        (c * h + y) * w + x
    }

    /// Element `(c, y, x)` of a rank-3 tensor. Panics when out of range.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(c, y, x)]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        let i = self.offset(c, y, x);
        &mut self.data[i]
    }

    /// Stacks equally shaped rank-3 images into a rank-4 batch.
    pub fn stack(images: &[Tensor]) -> Result<Tensor, TensorError> {
        let first = images.first().ok_or(TensorError::EmptyVector)?;
        if first.rank() != 3 {
            return Err(TensorError::Rank {
                expected: "3".into(),
                actual: first.rank(),
            });
        }
        let mut data = Vec::with_capacity(first.len() * images.len());
        for img in images {
            if img.dims != first.dims {
                return Err(TensorError::ShapeMismatch {
                    expected: first.dims.clone(),
                    actual: img.dims.clone(),
                });
            }
            data.extend_from_slice(&img.data);
        }
        let mut dims = vec![images.len()];
        dims.extend_from_slice(&first.dims);
        Tensor::new(dims, data)
    }

    /// Splits a batch back into rank-3 images; a rank-3 tensor yields itself.
    pub fn unstack(&self) -> Vec<Tensor> {
        match self.rank() {
            4 => (0..self.dims[0])
                .map(|n| Tensor {
                    dims: self.dims[1..].to_vec(),
                    data: self.image(n).to_vec(),
                })
                .collect(),
            _ => vec![self.clone()],
        }
    }

    pub(crate) fn from_parts_unchecked(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }
}
