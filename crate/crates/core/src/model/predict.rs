use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sampling::{clamp_b, sample_u};
use super::softmax::softmax_into;
use super::{CategoricalDataset, ModelError, VariationalState};
use crate::linalg::{self, DenseMatrix, JitterPolicy};

pub const DEFAULT_PREDICTIVE_SAMPLES: usize = 100;

/// Posterior predictive distribution of one hidden cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub row: usize,
    pub var: usize,
    /// Probability of each category `0..=K_d`.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictiveTable {
    pub entries: Vec<Prediction>,
}

impl PredictiveTable {
    pub fn get(&self, row: usize, var: usize) -> Option<&Prediction> {
        self.entries.iter().find(|p| p.row == row && p.var == var)
    }
}

/// Averages `softmax(f_nd)` over `samples` fresh joint draws of `x_n`, `U_d`
/// and `f_nd` for every target cell.
pub fn predictive_probs(
    state: &VariationalState,
    data: &CategoricalDataset,
    targets: &[(usize, usize)],
    samples: usize,
    seed: u64,
) -> Result<PredictiveTable, ModelError> {
    if data.n_vars() != state.n_vars() || data.cardinalities() != state.cardinalities().as_slice() {
        return Err(ModelError::Shape("data and state disagree on variables".into()));
    }
    if samples == 0 {
        return Err(ModelError::Shape("need at least one predictive sample".into()));
    }
    for &(row, var) in targets {
        if row >= state.n_rows() || row >= data.n_rows() {
            return Err(ModelError::UnknownRow { row });
        }
        if var >= data.n_vars() {
            return Err(ModelError::Shape(format!("variable {var} out of range")));
        }
        if data.cell(row, var).is_some() {
            return Err(ModelError::TargetObserved { row, var });
        }
    }

    let q = state.latent_dim();
    let n_ind = state.n_inducing();
    let z = state.inducing.as_slice();
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect::<BTreeSet<_>>().into_iter().collect();
    let vars: Vec<usize> = targets.iter().map(|t| t.1).collect::<BTreeSet<_>>().into_iter().collect();

    let mut chols = Vec::new();
    let mut lqs = Vec::new();
    for &d in &vars {
        let var = &state.variables[d];
        let kmm = var.kernel.gram(z, z, q);
        chols.push(linalg::cholesky(&kmm, JitterPolicy::default())?);
        lqs.push(var.chol_factor());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc: Vec<Vec<f64>> = targets.iter().map(|&(_, d)| vec![0.0; state.variables[d].n_weights() + 1]).collect();
    let mut x = vec![0.0; rows.len() * q];
    let mut ws: Vec<DenseMatrix> = Vec::with_capacity(vars.len());
    let mut probs = Vec::new();

    for _ in 0..samples {
        for (i, &r) in rows.iter().enumerate() {
            for c in 0..q {
                let e: f64 = rng.sample(StandardNormal);
                x[i * q + c] = state.means[(r, c)] + state.log_stds[(r, c)].exp() * e;
            }
        }
        ws.clear();
        for (j, &d) in vars.iter().enumerate() {
            let var = &state.variables[d];
            let kd = var.n_weights();
            let mut u = DenseMatrix::zeros(n_ind, kd);
            for k in 0..kd {
                let eu: Vec<f64> = (0..n_ind).map(|_| rng.sample(StandardNormal)).collect();
                for (m, val) in sample_u(var.mu.row(k), &lqs[j], &eu).into_iter().enumerate() {
                    u[(m, k)] = val;
                }
            }
            linalg::solve_lower_in_place(chols[j].l(), &mut u);
            ws.push(u);
        }
        for (t, &(row, d)) in targets.iter().enumerate() {
            let var = &state.variables[d];
            let kd = var.n_weights();
            let j = vars.binary_search(&d).expect("collected above");
            let i = rows.binary_search(&row).expect("collected above");
            let xn = &x[i * q..(i + 1) * q];
            let kmn = var.kernel.gram(z, xn, q);
            let mut v = kmn;
            linalg::solve_lower_in_place(chols[j].l(), &mut v);
            let knn = var.kernel.diag(xn, q)[0];
            let vv: f64 = v.as_slice().iter().map(|a| a * a).sum();
            let sb = clamp_b(knn - vv, knn).map_or(0.0, f64::sqrt);
            let f: Vec<f64> = (0..kd)
                .map(|k| {
                    let e: f64 = rng.sample(StandardNormal);
                    (0..n_ind).map(|m| v[(m, 0)] * ws[j][(m, k)]).sum::<f64>() + sb * e
                })
                .collect();
            softmax_into(&f, &mut probs);
            for (a, p) in acc[t].iter_mut().zip(&probs) {
                *a += p;
            }
        }
    }

    let scale = 1.0 / samples as f64;
    let entries = targets
        .iter()
        .zip(acc)
        .map(|(&(row, var), a)| Prediction { row, var, probs: a.into_iter().map(|p| p * scale).collect() })
        .collect();
    Ok(PredictiveTable { entries })
}
