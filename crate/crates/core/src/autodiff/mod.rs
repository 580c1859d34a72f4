//! Dense `f64` tensors, a reverse-mode tape, gradient checking, optimizers
//! and the parameter container format.

mod container;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use container::{decode, decode_prefix, encode, CONTAINER_VERSION};
pub use gradcheck::{grad_check, probe_is_smooth, GradCheckReport, FD_STEP, KINK_MARGIN};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use tape::{elu, forward_backward, leaky_relu, register, CustomOp, ParamVars, Tape, Var};
pub use tensor::{ParameterStore, Tensor};
