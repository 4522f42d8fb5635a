//! Shared inputs for the benchmarks.

use mscloudcam::numerics::{Scalar, Tensor};

/// Deterministic pseudo-random values in `[-1, 1)` without pulling in an RNG.
pub fn filled<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        T::lit(((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0)
    })
}
