//! Closed-form KL divergences of the variational factors from their priors.

use super::ModelError;
use crate::linalg::{self, CholeskyFactor, DenseMatrix};

/// `Σ_{n,i} KL(N(m, s²) ‖ N(0, σ_x²))`.
pub fn kl_x(means: &DenseMatrix, log_stds: &DenseMatrix, sigma_x: f64) -> f64 {
    let inv_var = 1.0 / (sigma_x * sigma_x);
    let log_sx = sigma_x.ln();
    means
        .as_slice()
        .iter()
        .zip(log_stds.as_slice())
        .map(|(&m, &ls)| {
            let s2 = (2.0 * ls).exp();
            log_sx - ls + 0.5 * (s2 + m * m) * inv_var - 0.5
        })
        .sum()
}

/// `Σ_k KL(N(μ_k, L Lᵀ) ‖ N(0, K_MM))` for the rows `μ_k` of `mu`.
pub fn kl_u(mu: &DenseMatrix, l: &DenseMatrix, kmm: &CholeskyFactor) -> Result<f64, ModelError> {
    Ok(KlUTerms::compute(mu, l, kmm)?.value)
}

/// Value of the inducing-output KL together with the pieces its adjoints need.
pub(crate) struct KlUTerms {
    pub value: f64,
    /// `K_MM⁻¹` (through the Cholesky solves).
    pub kinv: DenseMatrix,
    /// `K_MM⁻¹ μ_kᵀ` stacked as `K × M`.
    pub kinv_mu: DenseMatrix,
}

impl KlUTerms {
    pub fn compute(mu: &DenseMatrix, l: &DenseMatrix, kmm: &CholeskyFactor) -> Result<Self, ModelError> {
        let m = l.rows();
        if kmm.dim() != m || mu.cols() != m {
            return Err(ModelError::Shape(format!(
                "kl_u: K_MM is {}x{}, L is {m}x{m}, mu has {} columns",
                kmm.dim(),
                kmm.dim(),
                mu.cols()
            )));
        }
        let k = mu.rows() as f64;
        let kinv = linalg::spd_solve(kmm, &DenseMatrix::identity(m))?;
        let sigma = l.gram_outer();
        let tr: f64 = kinv.as_slice().iter().zip(sigma.as_slice()).map(|(a, b)| a * b).sum();
        let kinv_mu = linalg::spd_solve(kmm, &mu.transpose())?.transpose();
        let quad: f64 = mu.as_slice().iter().zip(kinv_mu.as_slice()).map(|(a, b)| a * b).sum();
        let logdet_k = linalg::logdet(kmm);
        let logdet_s: f64 = 2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>();
        let value = 0.5 * (k * tr + quad - k * m as f64 + k * logdet_k - k * logdet_s);
        Ok(Self { value, kinv, kinv_mu })
    }
}
