//! Small differentiable-computation toolkit: dense matrices, linear layers,
//! bidirectional GRUs, softmax/cross-entropy, an adaptive-moment optimizer,
//! a finite-difference gradient checker and a checkpoint container.
//!
//! Gradients are derived by hand for the fixed architectures used in this
//! crate; everything runs in `f64`.

mod checkpoint;
mod gradcheck;
mod gru;
mod matrix;
mod ops;
mod optim;
mod params;

pub use checkpoint::{Checkpoint, Section, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use gru::{BiGru, BiGruTrace, GruParams, GruTrace};
pub use matrix::{axpy, dot, Matrix};
pub use ops::{
    argmax, cross_entropy, leaky_relu, leaky_relu_grad, one_hot, sigmoid, softmax, softmax_backward, Linear,
    LEAKY_SLOPE,
};
pub(crate) use ops::softmax_unchecked;
pub use optim::{train_step, AdamConfig, OptimizerState};
pub use params::{
    accumulate, assign_flat, clip_global_norm, flatten, global_norm, join, num_params, param_names, scale_all,
    zeros_like, Joint, Params,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("gradient check error: {0}")]
    Check(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
