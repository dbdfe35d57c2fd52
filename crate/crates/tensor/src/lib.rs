//! Dense tensors with tape-based reverse-mode differentiation, the layer
//! kernels used by the segmentation and classification networks, optimizers,
//! a finite-difference gradient checker and the `FWWT` weight format.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;
pub mod weights;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::{OptimConfig, Optimizer, OptimizerKind};
pub use params::{param_count, Grads, Param, ParamCount, ParamSet};
pub use real::Real;
pub use tensor::Tensor;
