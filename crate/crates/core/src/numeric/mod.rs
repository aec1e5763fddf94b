//! Dense tensors, reverse-mode differentiation, and the probabilistic terms
//! every loss is assembled from.

pub mod gradcheck;
pub mod prob;
pub mod tape;
pub mod tensor;

pub use prob::{
    gaussian_log_likelihood, kl_bernoulli_vec, kl_diag_gaussian_vs_std_normal, reparam_sample,
};
pub use tape::{sigmoid, Record, Tape, Var};
pub use tensor::{Parameter, Tensor};

/// Bounds on the half-log-variance heads of every Gaussian network output.
pub const HALF_LOGVAR_MIN: f64 = -6.0;
pub const HALF_LOGVAR_MAX: f64 = 6.0;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-7;
