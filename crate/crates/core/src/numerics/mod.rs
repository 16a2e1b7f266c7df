//! Reverse-mode tensor core, optimizer, and gradient oracle.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{central_difference, finite_diff_check, max_rel_err, DEFAULT_STEP};
pub use optim::{AdamWConfig, Moments, OptimizerState, ParamUpdate, ADAM_EPS};
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
