//! Numerical substrate: float64 tensors, tape-based reverse-mode
//! differentiation, shared layers, optimizers, EMA, and checkpoints.
// `!(x > 0.0)` style checks are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod ema;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use ema::EmaState;
pub use error::{NumError, Result};
pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use ops::ConvPadding;
pub use optim::{
    clip_global_norm, transformer_lr, Optimizer, OptimizerConfig, OptimizerKind, OptimizerState,
};
pub use params::{Init, Layout, ParamStore, TensorMap};
pub use rng::SeedRng;
pub use tensor::Tensor;
