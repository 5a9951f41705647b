//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_strided, GradCheckReport};
pub use graph::{Bindings, Gradients, Graph, GraphError, NodeId, Op, PhaseOpts};
pub use optim::{adam_step, AdamConfig, OptimError, OptimState};
pub use params::ParamStore;
pub use tensor::{gemm, DType, Scalar, Tensor, TensorError};
