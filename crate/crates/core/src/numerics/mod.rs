//! Dense tensors, a reverse-mode tape over a fixed primitive set,
//! finite-difference gradient checking and AdamW.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use kernels::{l2_normalize, layer_norm, mse, sigmoid, softmax};
pub use optim::{adamw_step, AdamWConfig, OptimState, WarmupCosine};
pub use params::{Bound, ParamEntry, ParamId, ParamStore};
pub use tape::{Grads, Reduce, Tape, Var};
pub use tensor::{Dtype, Tensor};

#[cfg(test)]
mod tape_tests;
