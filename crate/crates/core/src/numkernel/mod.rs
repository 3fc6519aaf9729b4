//! Dense matrices, activations, and the reverse-mode gradient tape.

mod activation;
mod params;
mod tape;
mod tensor;

pub use activation::{gelu_approx, gelu_approx_grad, logistic, talu, talu_grad};
pub(crate) use params::param_block;
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{affine, Tensor2};
