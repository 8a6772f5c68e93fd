//! Dense tensors, their kernels, reverse-mode differentiation and AdamW.

pub mod autodiff;
pub mod gradcheck;
pub mod layers;
pub mod mgt;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use autodiff::{BackwardArgs, Gradients, ParamId, ParamStore, Parameter, Tape, Var};
pub use layers::{fan_in_uniform, Conv, Linear, Mlp2};
pub use ops::topk_desc;
pub use optim::{AdamWConfig, CosineSchedule, OptimizerState};
pub use scalar::Scalar;
pub use tensor::{shape_str, Tensor};
