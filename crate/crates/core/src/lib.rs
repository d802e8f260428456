//! Categorical latent Gaussian process (CLGP).
//!
//! Vectors of categorical variables are modelled as Softmax draws whose
//! weights are sparse-GP functions of a continuous latent point per row.
//! Inference maximizes a Monte Carlo estimate of the evidence lower bound
//! with reparameterized samples and RMSPROP.

pub mod baselines;
pub mod data;
pub mod eval;
pub mod gradients;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod optimizer;

pub use gradients::{elbo_grad, fd_check, GradientBundle};
pub use model::{CategoricalDataset, ElboReport, EpsilonDraws, ModelKind, VariationalState};
pub use optimizer::{train, TrainConfig};
