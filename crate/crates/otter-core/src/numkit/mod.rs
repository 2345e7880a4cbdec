//! Minimal differentiable numeric kernel: tensors, op kernels, a reverse-mode
//! tape, and the finite-difference harness that keeps all of it honest.

pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod ops;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use graph::{Graph, NodeId};
pub use ops::{Activation, PoolMode};
pub use tensor::{ParamId, ParamSet, ParamTensor, Scalar, Tensor};
