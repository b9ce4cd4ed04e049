//! Dense-tensor arithmetic with reverse-mode differentiation.

mod kernels;
pub mod nn;
mod tape;
mod tensor;

pub use tape::{GradientMap, NodeId, Tape};
pub use tensor::{broadcast_shape, broadcast_zip, Tensor};
