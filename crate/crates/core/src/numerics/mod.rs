//! Dense arrays, reverse-mode differentiation and counter-based randomness.

mod graph;
pub mod kernels;
mod rng;
mod scalar;
mod tensor;

pub use graph::{finite_diff_grad, permute_tensor, softmax, Gradients, Graph, Var};
pub use rng::{rng_normal, RandomStream};
pub use scalar::Scalar;
pub use tensor::{strides, Tensor};

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`; the floor keeps entries
/// that are zero up to round-off from dominating the ratio.
pub fn max_relative_error<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64(), y.to_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
