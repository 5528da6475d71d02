//! Minimal tensor and layer toolkit with hand-written backward passes.

pub mod layers;
pub mod optim;
pub mod tensor;

pub use layers::*;
pub use optim::Adam;
pub use tensor::{gemm, Param, Parameterized, Tensor};
