use serde::{Deserialize, Serialize};

use crate::kernels::KernelParams;
use crate::linalg::DenseMatrix;

/// Which objective the state is trained under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// RBF-kernel CLGP with both KL terms.
    Clgp,
    /// Latent Gaussian model: linear kernel, no KL term on the inducing outputs.
    Lgm,
}

impl ModelKind {
    pub fn includes_kl_u(self) -> bool {
        matches!(self, ModelKind::Clgp)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Clgp => "clgp",
            ModelKind::Lgm => "lgm",
        }
    }
}

/// The two blocks optimized in alternation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Latent means and log-stds, inducing inputs, kernel hyperparameters.
    Latent,
    /// Variational means and Cholesky factors of the inducing outputs.
    Inducing,
}

/// Per-variable free parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableParams {
    /// `K_d × M`; row `k` is the mean of `u_dk`.
    pub mu: DenseMatrix,
    /// `M × M` lower-triangular; the diagonal stores `log diag(L_d)`.
    pub l_raw: DenseMatrix,
    pub kernel: KernelParams,
}

impl VariableParams {
    pub fn n_weights(&self) -> usize {
        self.mu.rows()
    }

    /// `L_d` with exponentiated diagonal, so `Σ_d = L_d L_dᵀ`.
    pub fn chol_factor(&self) -> DenseMatrix {
        let m = self.l_raw.rows();
        let mut l = DenseMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..i {
                l[(i, j)] = self.l_raw[(i, j)];
            }
            l[(i, i)] = self.l_raw[(i, i)].exp();
        }
        l
    }

    /// Sets `l_raw` so that `chol_factor()` returns `l` (lower part read).
    pub fn set_chol_factor(&mut self, l: &DenseMatrix) {
        let m = l.rows();
        for i in 0..m {
            for j in 0..i {
                self.l_raw[(i, j)] = l[(i, j)];
            }
            self.l_raw[(i, i)] = l[(i, i)].ln();
            for j in (i + 1)..m {
                self.l_raw[(i, j)] = 0.0;
            }
        }
    }
}

/// Every free parameter of the variational approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub kind: ModelKind,
    /// Fixed prior standard deviation of the latent coordinates.
    pub sigma_x: f64,
    /// `N × Q` latent means.
    pub means: DenseMatrix,
    /// `N × Q` latent log standard deviations.
    pub log_stds: DenseMatrix,
    /// `M × Q` inducing inputs.
    pub inducing: DenseMatrix,
    pub variables: Vec<VariableParams>,
}

impl VariationalState {
    pub fn n_rows(&self) -> usize {
        self.means.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.cols()
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing.rows()
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    /// `K_d` per variable (number of non-reference categories).
    pub fn cardinalities(&self) -> Vec<usize> {
        self.variables.iter().map(VariableParams::n_weights).collect()
    }

    pub fn max_cardinality(&self) -> usize {
        self.cardinalities().into_iter().max().unwrap_or(0)
    }

    pub fn stds(&self) -> DenseMatrix {
        let data = self.log_stds.as_slice().iter().map(|v| v.exp()).collect();
        DenseMatrix::from_vec(self.log_stds.rows(), self.log_stds.cols(), data).expect("shape preserved")
    }

    pub fn is_finite(&self) -> bool {
        self.means.is_finite()
            && self.log_stds.is_finite()
            && self.inducing.is_finite()
            && self
                .variables
                .iter()
                .all(|v| v.mu.is_finite() && v.l_raw.is_finite() && v.kernel.is_finite())
    }

    /// With `b = 0` the linear model's predictions do not depend on the
    /// kernel hyperparameters at all, so they are held fixed there.
    pub fn kernel_is_free(&self) -> bool {
        self.kind == ModelKind::Clgp
    }

    pub fn n_free_kernel_params(&self) -> usize {
        if self.kernel_is_free() {
            self.variables.iter().map(|v| v.kernel.n_params()).sum()
        } else {
            0
        }
    }

    /// Flattens one parameter group in a fixed order.
    ///
    /// Latent: means, log-stds, inducing inputs, then each variable's kernel
    /// hyperparameters (CLGP only). Inducing: for each variable, `mu` row-major followed by
    /// the lower triangle of `l_raw` row by row.
    pub fn pack(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::new();
        match group {
            ParamGroup::Latent => {
                out.extend_from_slice(self.means.as_slice());
                out.extend_from_slice(self.log_stds.as_slice());
                out.extend_from_slice(self.inducing.as_slice());
                if self.kernel_is_free() {
                    for v in &self.variables {
                        out.extend(v.kernel.to_vec());
                    }
                }
            }
            ParamGroup::Inducing => {
                for v in &self.variables {
                    out.extend_from_slice(v.mu.as_slice());
                    push_lower(&v.l_raw, &mut out);
                }
            }
        }
        out
    }

    /// Inverse of [`pack`](Self::pack). Panics on a length mismatch.
    pub fn unpack(&mut self, group: ParamGroup, values: &[f64]) {
        let mut cursor = Cursor { values, pos: 0 };
        match group {
            ParamGroup::Latent => {
                cursor.fill(self.means.as_mut_slice());
                cursor.fill(self.log_stds.as_mut_slice());
                cursor.fill(self.inducing.as_mut_slice());
                if self.kernel_is_free() {
                    for v in &mut self.variables {
                        let n = v.kernel.n_params();
                        v.kernel.set_from_slice(cursor.take(n));
                    }
                }
            }
            ParamGroup::Inducing => {
                for v in &mut self.variables {
                    cursor.fill(v.mu.as_mut_slice());
                    let m = v.l_raw.rows();
                    for i in 0..m {
                        let row = cursor.take(i + 1);
                        v.l_raw.row_mut(i)[..=i].copy_from_slice(row);
                    }
                }
            }
        }
        assert_eq!(cursor.pos, values.len(), "unpack length mismatch");
    }

    pub fn n_params(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::Latent => {
                2 * self.means.as_slice().len()
                    + self.inducing.as_slice().len()
                    + self.n_free_kernel_params()
            }
            ParamGroup::Inducing => self
                .variables
                .iter()
                .map(|v| {
                    let m = v.l_raw.rows();
                    v.mu.as_slice().len() + m * (m + 1) / 2
                })
                .sum(),
        }
    }
}

pub(crate) fn push_lower(m: &DenseMatrix, out: &mut Vec<f64>) {
    for i in 0..m.rows() {
        out.extend_from_slice(&m.row(i)[..=i]);
    }
}

struct Cursor<'a> {
    values: &'a [f64],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [f64] {
        let s = &self.values[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn fill(&mut self, dst: &mut [f64]) {
        let n = dst.len();
        dst.copy_from_slice(self.take(n));
    }
}
