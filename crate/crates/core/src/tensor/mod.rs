//! Dense matrices and the gradient tape used for training and input gradients.

mod matrix;
mod tape;

pub use matrix::{argmax, l2_norm, logsumexp, row_l2_norm, rowwise_softmax, softmax, softmax_into, Matrix};
pub use tape::{GradTape, Gradients, Targets, Var};
