//! Dense f32 tensor math with reverse-mode autodiff, plus the optimizers
//! needed for the networks in this crate (Adam, cosine annealing, EMA).
//!
//! The op set is fixed: matmul (2-D and batched 3-D), broadcast
//! add/sub/mul, ELU, exp, layer-norm, softmax, reductions, slicing,
//! concatenation, reshape/permute, clamp and elementwise min. That is
//! exactly what the MLPs and transformer blocks here need, and every op
//! has a finite-difference-checked gradient.

mod graph;
mod kernels;
mod nn;
mod optim;
mod tensor;

pub use graph::{forward_backward, GradMap, Graph, Var};
pub use kernels::{matmul_seq, matmul_view};
#[cfg(feature = "parallel")]
pub use kernels::matmul_par;
pub use nn::{seeded_rng, Linear, Mlp};
pub use optim::{adam_step, cosine_lr, ema_update, AdamConfig, EmaSet, ParamSet};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got {0} elements")]
    NonScalarLoss(usize),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("{0}")]
    Invalid(String),
}
