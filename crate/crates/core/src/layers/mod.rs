//! Forward and backward passes for every layer kind used by the pooling
//! network and the patch baseline.
//!
//! Backward routines come in two flavours: `*_backward` allocates fresh
//! gradient buffers, `*_backward_into` accumulates into caller-owned ones so
//! that a graph can sum contributions from several consumers.

mod activation;
mod conv;
mod fc;
mod pool;

pub use activation::{
    relu_backward, relu_forward, softmax, softmax_xent_backward, softmax_xent_forward,
    SoftmaxCrossEntropy,
};
pub use conv::{ConvGrads, ConvLayer};
pub use fc::{FcGrads, FullyConnectedLayer};
pub use pool::{maxpool_backward, maxpool_backward_into, maxpool_forward, MaxPoolLayer, MaxPoolSaved, SspLayer};

use crate::scalar::Scalar;
use rand::Rng;

/// Zero-mean uniform initialisation with limit `sqrt(6 / fan_in)`, which keeps
/// the activation variance constant through ReLU layers.
pub fn he_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, fan_in: usize) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::lit(rng.gen_range(-limit..=limit)))
        .collect()
}

/// Inner product with eight independent partial sums, combined in a fixed
/// order, so the compiler can vectorise it.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}
