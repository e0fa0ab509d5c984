//! Dense kernels, the attention primitive, transformer blocks, and the
//! finite-difference gradient oracle.

mod block;
pub mod flops;
pub(crate) mod gemm;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use block::{
    attend, attention, encoder_block, encoder_block_forward, layer_norm, linear, msa, BlockShape,
};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, LossAndGrads};
pub use graph::{Gradients, Graph, Var, BCE_CLAMP, LN_EPS};
pub use params::{Init, ParamTree};
pub use tensor::Tensor;
