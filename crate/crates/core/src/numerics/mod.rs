//! Differentiation, optimization and noise primitives shared by both networks.

mod adam;
mod gumbel;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gumbel::{gumbel_from_uniform, gumbel_sample, uniform_open};
pub use tape::{
    grad_check, grad_check_all, value_and_grad, CustomOp, Gradients, SparseOperator, Tape, Tensor,
    Var,
};
