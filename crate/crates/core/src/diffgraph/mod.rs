//! Reverse-mode differentiation engine for the small dense networks used by
//! the certificate learner, including the differentiable symmetric
//! max-eigenvalue operation and input-Jacobian construction.

mod eig;
mod mlp;
mod optim;
mod tape;

pub use eig::{jacobi_eigh, sym_max_eig, sym_min_eig};
pub use mlp::{MlpExpr, MlpParams};
pub use optim::{adam_step, sgd_step, AdamState, Optimizer, OptimizerKind};
pub use tape::{grad_params, Adjoints, Tape, Var};
