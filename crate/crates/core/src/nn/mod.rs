//! Minimal dense-matrix autodiff used by the transformer and the edge-gate
//! optimizer.

mod attention;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{gemm_into, matmul, DType, Scalar, Tensor};
