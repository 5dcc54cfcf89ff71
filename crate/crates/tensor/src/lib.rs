//! A compact reverse-mode autodiff engine for small 2D convolutional networks.
//!
//! Everything runs in `f64` on the CPU and is fully deterministic: the same
//! inputs always produce bit-identical outputs and gradients.

mod kernels;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use kernels::conv_out_size;
pub use optim::Adam;
pub use param::{Param, ParamRole};
pub use tape::{BatchStats, Grads, Tape, Var};
pub use tensor::Tensor;
