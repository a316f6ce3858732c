//! Minimal dense-network numeric core: matrices, MLP forward/backward,
//! losses, optimizers, and a finite-difference gradient checker.

pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod mlp;
pub mod optim;

pub use gradcheck::{grad_check, relative_error};
pub use loss::{softmax_cross_entropy, CrossEntropy};
pub use matrix::Matrix;
pub use mlp::{softmax_rows, Activation, ActivationStack, DropoutMask, Gradients, Layer, Mlp};
pub use optim::{OptimizerKind, OptimizerState};
