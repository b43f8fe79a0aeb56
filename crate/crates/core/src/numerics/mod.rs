//! Dense tensors and the reverse-mode graph used to train the network.
//!
//! Every primitive the network needs (convolution, dense layers, elementwise
//! nonlinearities, softmax, reductions and the capsule-specific contractions)
//! is recorded on a [`Graph`] during the forward pass and differentiated by
//! replaying the record backwards. Kernels are generic over [`Real`] so the
//! same code runs in `f32` for training and `f64` for gradient checks.

mod graph;
pub mod kernels;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, NumCast};
use rand::Rng;

pub use graph::{Activation, Graph, Var};
pub use tensor::Tensor;

/// Floating-point element type of tensors and graphs.
pub trait Real: Float + AddAssign + Sum + Default + Debug + Display + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn cst<T: Real>(x: f64) -> T {
    <T as NumCast>::from(x).expect("f64 constant representable in T")
}

/// Zero-mean uniform weights with variance `gain / fan_in`
/// (`gain = 2` is the He scaling for ReLU layers).
pub fn uniform_fan_in<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> crate::Result<Tensor<T>> {
    let bound = (3.0 * gain / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| cst(rng.gen_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fan_in_init_has_expected_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t: Tensor<f64> = uniform_fan_in(&[200, 50], 50, 2.0, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01);
        assert!((var - 2.0 / 50.0).abs() < 0.004, "variance {var}");
    }
}
