//! The categorical latent Gaussian process: parameters, reparameterized
//! sampling, KL terms, the Monte Carlo lower bound and posterior predictive.

mod checkpoint;
mod dataset;
mod kl;
mod objective;
mod predict;
mod sampling;
mod softmax;
mod state;

use thiserror::Error;

use crate::linalg::LinalgError;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use dataset::{CategoricalDataset, DatasetError};
pub use kl::{kl_u, kl_x};
pub use objective::{elbo, ElboReport};
pub use predict::{predictive_probs, Prediction, PredictiveTable, DEFAULT_PREDICTIVE_SAMPLES};
pub use sampling::{conditional_coeffs, sample_f, sample_u, sample_x, ConditionalCoeffs, EpsShape, EpsilonDraws};
pub use softmax::{log_softmax_prob, lse, softmax_probs};
pub use state::{ModelKind, ParamGroup, VariableParams, VariationalState};

pub(crate) use objective::{evaluate, Wants};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("category index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("target cell ({row}, {var}) is observed, not missing")]
    TargetObserved { row: usize, var: usize },
    #[error("row {row} was not part of training")]
    UnknownRow { row: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}
