//! Differentiable feature operations, parameter storage and optimization.

mod gemm;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use params::{Adam, Checkpoint, NetworkParams, ParamId, ParamTensor, RngState};
pub use tape::{sharpened_sigmoid, Gradients, Tape, Var, ZERO_ROW};
