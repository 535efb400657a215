//! Dense `f64` matrices with a reverse-mode tape, multi-layer perceptrons,
//! the Adam optimiser, finite-difference gradient checks and a binary
//! checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod tape;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointReader};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use mlp::{mlp_apply, Activation, Dense, Mlp, MlpOutput, MlpVars};
pub use tape::{bce_logit, log_sum_exp, sigmoid, Gradients, Tape, Var};
