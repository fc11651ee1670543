//! Minimal CPU tensor engine: volumetric convolutions via im2col and SGEMM,
//! pooling, resampling and a dense head, each with an explicit adjoint.
//!
//! Tensors are `[channels, depth, height, width]`; a 2-D feature map has
//! depth 1.

mod layers;
mod nets;

pub use layers::{
    avg_pool, avg_pool_backward, bilinear_up2, bilinear_up2_backward, concat_channels,
    global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward, nearest_up2,
    nearest_up2_backward, split_channels, Conv, Dense, Layer, Sequential,
};
pub use nets::{ClassifierNet, UNet};

use crate::Result;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense 4-D tensor in `[c, d, h, w]` row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor size");
        Self { shape, data }
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Elements per channel.
    pub fn spatial(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// A trainable network mapping an input tensor to logits.
///
/// Classifiers return a `[1, 1, 1, 1]` logit; dense predictors return
/// `[1, 1, H, W]`.
pub trait Network: Send + Sync {
    fn forward(&self, input: &Tensor) -> Tensor;

    /// Runs a forward pass, asks `loss_grad` for dL/dlogits and accumulates
    /// parameter gradients. Returns the logits.
    fn forward_backward(
        &mut self,
        input: &Tensor,
        loss_grad: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<Tensor>;

    /// Parameter buffers in a fixed order (this order defines the weight blob).
    fn params(&self) -> Vec<&[f32]>;

    fn params_and_grads(&mut self) -> Vec<(&mut [f32], &mut [f32])>;

    fn zero_grad(&mut self) {
        for (_, g) in self.params_and_grads() {
            g.fill(0.0);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// He-normal initialisation: N(0, 2 / fan_in).
pub(crate) fn he_normal<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), row-major.
/// `a_t`/`b_t` mark operands stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds are asserted above and the strides describe the
    // declared row-major layouts exactly.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
