//! Dense tensors, a reverse-mode tape, and a counter-based random stream.

mod kernels;
mod real;
mod rng;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use real::Real;
pub use rng::RngState;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub(crate) use tensor::contiguous_strides;
