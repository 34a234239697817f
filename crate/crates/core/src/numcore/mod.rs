//! Numeric substrate: matrices, layers, Adam, seeded randomness and
//! finite-difference checking.

mod adam;
mod gradcheck;
mod layers;
mod matrix;
mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_errors};
pub use layers::{
    bce_with_logit, bce_with_prob, dense_backward, dense_forward, he_normal_init, log_softmax_rows, relu,
    relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar, softmax_backward, softmax_rows, Dense,
};
pub use matrix::Matrix;
pub use rng::{Rng, RngState};
