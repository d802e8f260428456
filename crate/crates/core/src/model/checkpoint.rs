//! Versioned JSON checkpoint of a [`VariationalState`].
//!
//! Floats are written in shortest round-trip form and parsed exactly, so
//! save → load reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::state::{ModelKind, VariableParams, VariationalState};
use crate::kernels::KernelParams;
use crate::linalg::DenseMatrix;

pub const CHECKPOINT_FORMAT: &str = "clgp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: VariationalState,
    /// Seed the state was initialized and trained with.
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Doc {
    format: String,
    version: u32,
    model: ModelKind,
    seed: u64,
    rows: usize,
    latent_dim: usize,
    inducing_count: usize,
    sigma_x: f64,
    cardinalities: Vec<usize>,
    means: Vec<Vec<f64>>,
    log_stds: Vec<Vec<f64>>,
    inducing_inputs: Vec<Vec<f64>>,
    variables: Vec<VarDoc>,
}

#[derive(Serialize, Deserialize)]
struct VarDoc {
    kernel: KernelParams,
    mu: Vec<Vec<f64>>,
    /// Lower triangle only; row `i` holds `i + 1` entries.
    l_raw: Vec<Vec<f64>>,
}

fn rows_of(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn matrix_of(rows: &[Vec<f64>], n_rows: usize, n_cols: usize, what: &str) -> Result<DenseMatrix, CheckpointError> {
    if rows.len() != n_rows || rows.iter().any(|r| r.len() != n_cols) {
        return Err(CheckpointError::Format(format!("{what} is not {n_rows}x{n_cols}")));
    }
    DenseMatrix::from_vec(n_rows, n_cols, rows.concat()).map_err(|e| CheckpointError::Format(e.to_string()))
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let s = &self.state;
        let doc = Doc {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: s.kind,
            seed: self.seed,
            rows: s.n_rows(),
            latent_dim: s.latent_dim(),
            inducing_count: s.n_inducing(),
            sigma_x: s.sigma_x,
            cardinalities: s.cardinalities(),
            means: rows_of(&s.means),
            log_stds: rows_of(&s.log_stds),
            inducing_inputs: rows_of(&s.inducing),
            variables: s
                .variables
                .iter()
                .map(|v| VarDoc {
                    kernel: v.kernel.clone(),
                    mu: rows_of(&v.mu),
                    l_raw: (0..v.l_raw.rows()).map(|i| v.l_raw.row(i)[..=i].to_vec()).collect(),
                })
                .collect(),
        };
        let mut out = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let doc: Doc = serde_json::from_str(text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(format!("unknown format tag {:?}", doc.format)));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {}", doc.version)));
        }
        if doc.variables.len() != doc.cardinalities.len() {
            return Err(CheckpointError::Format("variable count disagrees with cardinalities".into()));
        }
        let (n, q, m) = (doc.rows, doc.latent_dim, doc.inducing_count);
        let means = matrix_of(&doc.means, n, q, "means")?;
        let log_stds = matrix_of(&doc.log_stds, n, q, "log_stds")?;
        let inducing = matrix_of(&doc.inducing_inputs, m, q, "inducing_inputs")?;
        let mut variables = Vec::with_capacity(doc.variables.len());
        for (d, (v, &kd)) in doc.variables.into_iter().zip(&doc.cardinalities).enumerate() {
            let mu = matrix_of(&v.mu, kd, m, &format!("variables[{d}].mu"))?;
            if v.l_raw.len() != m || v.l_raw.iter().enumerate().any(|(i, r)| r.len() != i + 1) {
                return Err(CheckpointError::Format(format!("variables[{d}].l_raw is not lower-triangular {m}x{m}")));
            }
            let mut l_raw = DenseMatrix::zeros(m, m);
            for (i, r) in v.l_raw.iter().enumerate() {
                l_raw.row_mut(i)[..=i].copy_from_slice(r);
            }
            let expected = match &v.kernel {
                KernelParams::ArdRbf(p) => p.log_lengthscales.len() == q,
                KernelParams::Linear(_) => true,
            };
            if !expected {
                return Err(CheckpointError::Format(format!("variables[{d}] kernel has wrong dimension")));
            }
            variables.push(VariableParams { mu, l_raw, kernel: v.kernel });
        }
        let state = VariationalState { kind: doc.model, sigma_x: doc.sigma_x, means, log_stds, inducing, variables };
        Ok(Self { state, seed: doc.seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
