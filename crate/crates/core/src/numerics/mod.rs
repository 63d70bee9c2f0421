//! Dense tensors, reverse-mode gradients, parameter storage and a
//! reproducible random stream.

mod graph;
mod params;
mod rng;
mod tensor;

pub use graph::{finite_difference_grad, forward_backward, Gradients, Graph, Var};
pub use params::{Param, ParamStore};
pub use rng::Rng;
pub use tensor::{cosine_similarity, Real, Tensor};

pub(crate) use params::hex;

/// Largest element-wise relative error between two tensors, with
/// denominators floored at `floor`.
pub fn max_relative_error<F: Real>(a: &Tensor<F>, b: &Tensor<F>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
