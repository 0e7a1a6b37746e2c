//! Reverse-mode automatic differentiation over dense `f64` tensors, plus
//! the Adam optimizer and a straight-through Gumbel-Softmax sampler.

mod adam;
mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, ParamSet};
pub use gradcheck::{check_gradients, finite_diff_check, relative_error, RELATIVE_ERROR_FLOOR};
pub use tape::{gumbel_noise, sigmoid, softmax_in_place, Activation, Tape, Var};
#[allow(unused_imports)]
pub(crate) use tape::argmax;
pub use tensor::Tensor;

use rand::Rng;

use crate::rng::RandomStream;

/// `uniform(-a, a)` with `a = 1/sqrt(fan_in)`.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut RandomStream) -> Tensor {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[cfg(test)]
mod tests;
