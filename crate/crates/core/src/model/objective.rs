//! Monte Carlo evidence lower bound and its pathwise gradient.
//!
//! For sample `t` and variable `d` the forward pass is
//!
//! ```text
//! X  = m + s ⊙ ε_x
//! V  = L_K⁻¹ K_MN(X)            (L_K L_Kᵀ = K_MM + jitter·I)
//! U  = μ + L_d ε_u,   W = L_K⁻¹ U
//! b  = K_nn − colsum(V ⊙ V)      (so Vᵀ W = Aᵀ U with A = K_MM⁻¹ K_MN)
//! F  = Vᵀ W + √b ⊙ ε_f
//! ```
//!
//! followed by the reference-class Softmax log-likelihood of every observed
//! cell. The backward pass retraces these steps in reverse; the jitter picked
//! by the Cholesky factorization is frozen for the evaluation.

use serde::{Deserialize, Serialize};

use super::kl::{self, KlUTerms};
use super::sampling::{clamp_b, sample_u, sample_x, EpsShape, EpsilonDraws};
use super::softmax::lse;
use super::{CategoricalDataset, ModelError, VariationalState};
use crate::gradients::GradientBundle;
use crate::linalg::{self, axpy, dot, CholeskyFactor, DenseMatrix, JitterPolicy};

/// One evaluation of the lower bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub elbo: f64,
    pub kl_x: f64,
    pub kl_u: f64,
    /// Mean of `per_sample_loglik`.
    pub mean_loglik: f64,
    /// Total observed-cell log-likelihood under each Monte Carlo sample.
    pub per_sample_loglik: Vec<f64>,
    /// Sample standard deviation of `per_sample_loglik` (0 when `T = 1`).
    pub mc_std: f64,
    /// Conditional variances clamped to zero, summed over samples and variables.
    pub clamped_b: usize,
}

impl ElboReport {
    pub fn is_finite(&self) -> bool {
        self.elbo.is_finite() && self.mc_std.is_finite()
    }
}

/// MC estimate of the lower bound. Deterministic in `(state, data, eps)`.
pub fn elbo(state: &VariationalState, data: &CategoricalDataset, eps: &EpsilonDraws) -> Result<ElboReport, ModelError> {
    evaluate(state, data, eps, None).map(|(r, _)| r)
}

/// Which gradient blocks to fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Wants {
    pub latent: bool,
    pub inducing: bool,
}

pub(crate) fn check_shapes(state: &VariationalState, data: &CategoricalDataset, eps: &EpsilonDraws) -> Result<(), ModelError> {
    if data.n_rows() != state.n_rows() || data.n_vars() != state.n_vars() {
        return Err(ModelError::Shape(format!(
            "data is {}x{} but state covers {}x{}",
            data.n_rows(),
            data.n_vars(),
            state.n_rows(),
            state.n_vars()
        )));
    }
    if data.cardinalities() != state.cardinalities().as_slice() {
        return Err(ModelError::Shape("data and state disagree on variable cardinalities".into()));
    }
    if eps.samples() == 0 {
        return Err(ModelError::Shape("need at least one Monte Carlo sample".into()));
    }
    if eps.shape() != EpsShape::for_state(state, eps.samples()) {
        return Err(ModelError::Shape(format!("noise shape {:?} does not match state", eps.shape())));
    }
    Ok(())
}

/// Rows processed together per sample and variable, sized so the
/// `M × ROW_CHUNK` panels stay in cache.
const ROW_CHUNK: usize = 128;

struct VarCache {
    kmm: DenseMatrix,
    chol: CholeskyFactor,
    lq: DenseMatrix,
    kl: Option<KlUTerms>,
}

pub(crate) fn evaluate(
    state: &VariationalState,
    data: &CategoricalDataset,
    eps: &EpsilonDraws,
    wants: Option<Wants>,
) -> Result<(ElboReport, Option<GradientBundle>), ModelError> {
    check_shapes(state, data, eps)?;
    let n_rows = state.n_rows();
    let q = state.latent_dim();
    let n_ind = state.n_inducing();
    let samples = eps.samples();
    let z = state.inducing.as_slice();

    let mut caches = Vec::with_capacity(state.n_vars());
    let mut kl_u = 0.0;
    for var in &state.variables {
        let kmm = var.kernel.gram(z, z, q);
        let chol = linalg::cholesky(&kmm, JitterPolicy::default())?;
        let lq = var.chol_factor();
        let kl = if state.kind.includes_kl_u() && var.n_weights() > 0 {
            let terms = KlUTerms::compute(&var.mu, &lq, &chol)?;
            kl_u += terms.value;
            Some(terms)
        } else {
            None
        };
        caches.push(VarCache { kmm, chol, lq, kl });
    }
    let kl_x = kl::kl_x(&state.means, &state.log_stds, state.sigma_x);

    let want_latent = wants.is_some_and(|w| w.latent);
    let want_inducing = wants.is_some_and(|w| w.inducing);
    let mut grads = wants.map(|_| GradientBundle::zeros_like(state));
    let mut l_k_bar: Vec<DenseMatrix> = if want_latent {
        (0..state.n_vars()).map(|_| DenseMatrix::zeros(n_ind, n_ind)).collect()
    } else {
        Vec::new()
    };
    let stds = state.stds();
    let weight = 1.0 / samples as f64;

    let mut per_sample = Vec::with_capacity(samples);
    let mut clamped_total = 0usize;
    let mut vsq = vec![0.0; ROW_CHUNK];
    let mut sb = vec![0.0; ROW_CHUNK];
    let mut clamped = vec![false; ROW_CHUNK];
    let mut db = vec![0.0; ROW_CHUNK];
    let mut fcol = Vec::new();

    for t in 0..samples {
        let x = sample_x(&state.means, &state.log_stds, eps.x(t));
        let xs = x.as_slice();
        let mut x_bar = if want_latent { vec![0.0; n_rows * q] } else { Vec::new() };
        let mut ll = 0.0;

        for (d, var) in state.variables.iter().enumerate() {
            let kd = var.n_weights();
            if kd == 0 {
                continue;
            }
            let cache = &caches[d];
            let lk = cache.chol.l();

            let mut u = DenseMatrix::zeros(n_ind, kd);
            for k in 0..kd {
                let uk = sample_u(var.mu.row(k), &cache.lq, eps.u(t, d, k));
                for (m, val) in uk.into_iter().enumerate() {
                    u[(m, k)] = val;
                }
            }
            let mut w = u;
            linalg::solve_lower_in_place(lk, &mut w);
            // Accumulates V F_barᵀ over row chunks; becomes U_bar after the solve.
            let mut u_bar = DenseMatrix::zeros(n_ind, kd);

            for n0 in (0..n_rows).step_by(ROW_CHUNK) {
                let n1 = (n0 + ROW_CHUNK).min(n_rows);
                let len = n1 - n0;
                let xs_c = &xs[n0 * q..n1 * q];

                let kmn = var.kernel.gram(z, xs_c, q);
                let mut v = kmn.clone();
                linalg::solve_lower_in_place(lk, &mut v);
                let knn = var.kernel.diag(xs_c, q);

                let vsq = &mut vsq[..len];
                vsq.iter_mut().for_each(|s| *s = 0.0);
                for m in 0..n_ind {
                    for (acc, vm) in vsq.iter_mut().zip(v.row(m)) {
                        *acc += vm * vm;
                    }
                }
                for c in 0..len {
                    match clamp_b(knn[c] - vsq[c], knn[c]) {
                        Some(b) => {
                            sb[c] = b.sqrt();
                            clamped[c] = false;
                        }
                        None => {
                            sb[c] = 0.0;
                            clamped[c] = true;
                            clamped_total += 1;
                        }
                    }
                }

                // F stored transposed (K × rows) so the M-long reduction is a row axpy.
                let mut ft = DenseMatrix::zeros(kd, len);
                for k in 0..kd {
                    let row = ft.row_mut(k);
                    for m in 0..n_ind {
                        let c = w[(m, k)];
                        if c != 0.0 {
                            axpy(c, v.row(m), row);
                        }
                    }
                }
                for c in 0..len {
                    if sb[c] != 0.0 {
                        let ef = eps.f(t, n0 + c, d);
                        for k in 0..kd {
                            ft[(k, c)] += sb[c] * ef[k];
                        }
                    }
                }

                let mut ft_bar = if wants.is_some() { DenseMatrix::zeros(kd, len) } else { DenseMatrix::zeros(0, 0) };
                for c in 0..len {
                    let Some(y) = data.cell(n0 + c, d) else { continue };
                    fcol.clear();
                    fcol.extend((0..kd).map(|k| ft[(k, c)]));
                    let norm = lse(&fcol);
                    ll += if y == 0 { 0.0 } else { fcol[y - 1] } - norm;
                    if wants.is_some() {
                        for k in 0..kd {
                            let target = if y == k + 1 { 1.0 } else { 0.0 };
                            ft_bar[(k, c)] = weight * (target - (fcol[k] - norm).exp());
                        }
                    }
                }

                let Some(g) = grads.as_mut() else { continue };

                // W = L_K⁻¹ U  →  W_bar = V F_barᵀ.
                for m in 0..n_ind {
                    for k in 0..kd {
                        u_bar[(m, k)] += dot(v.row(m), ft_bar.row(k));
                    }
                }

                if want_latent {
                    let db = &mut db[..len];
                    for c in 0..len {
                        db[c] = if clamped[c] {
                            0.0
                        } else {
                            let ef = eps.f(t, n0 + c, d);
                            (0..kd).map(|k| ft_bar[(k, c)] * ef[k]).sum::<f64>() / (2.0 * sb[c])
                        };
                    }
                    // V_bar = W F_bar − 2 V diag(b_bar); then K_MN_bar = L_K⁻ᵀ V_bar.
                    let mut kmn_bar = DenseMatrix::zeros(n_ind, len);
                    for m in 0..n_ind {
                        let row = kmn_bar.row_mut(m);
                        for k in 0..kd {
                            let c = w[(m, k)];
                            if c != 0.0 {
                                axpy(c, ft_bar.row(k), row);
                            }
                        }
                        for ((r, vm), dbn) in row.iter_mut().zip(v.row(m)).zip(db.iter()) {
                            *r -= 2.0 * vm * dbn;
                        }
                    }
                    linalg::solve_upper_t_in_place(lk, &mut kmn_bar);
                    let lkb = &mut l_k_bar[d];
                    for i in 0..n_ind {
                        for j in 0..=i {
                            lkb[(i, j)] -= dot(kmn_bar.row(i), v.row(j));
                        }
                    }
                    let x_bar_c = &mut x_bar[n0 * q..n1 * q];
                    var.kernel.gram_backward(
                        z,
                        xs_c,
                        q,
                        &kmn,
                        &kmn_bar,
                        Some(g.inducing.as_mut_slice()),
                        Some(&mut *x_bar_c),
                        &mut g.kernel[d],
                    );
                    var.kernel.diag_backward(xs_c, q, db, Some(x_bar_c), &mut g.kernel[d]);
                }
            }

            let Some(g) = grads.as_mut() else { continue };
            linalg::solve_upper_t_in_place(lk, &mut u_bar);

            if want_inducing {
                let mu_bar = &mut g.mu[d];
                let lq_bar = &mut g.l_raw[d];
                for k in 0..kd {
                    let eu = eps.u(t, d, k);
                    for i in 0..n_ind {
                        let ub = u_bar[(i, k)];
                        mu_bar[(k, i)] += ub;
                        axpy(ub, &eu[..=i], &mut lq_bar.row_mut(i)[..=i]);
                    }
                }
            }

            if want_latent {
                let lkb = &mut l_k_bar[d];
                for i in 0..n_ind {
                    for j in 0..=i {
                        lkb[(i, j)] -= dot(u_bar.row(i), w.row(j));
                    }
                }
            }
        }

        if let (true, Some(g)) = (want_latent, grads.as_mut()) {
            let ex = eps.x(t);
            let s = stds.as_slice();
            let means_bar = g.means.as_mut_slice();
            for (i, xb) in x_bar.iter().enumerate() {
                means_bar[i] += xb;
            }
            let log_stds_bar = g.log_stds.as_mut_slice();
            for (i, xb) in x_bar.iter().enumerate() {
                log_stds_bar[i] += xb * ex[i] * s[i];
            }
        }
        per_sample.push(ll);
    }

    if let Some(g) = grads.as_mut() {
        let inv_var = 1.0 / (state.sigma_x * state.sigma_x);
        for (d, var) in state.variables.iter().enumerate() {
            let cache = &caches[d];
            let kd = var.n_weights() as f64;
            if want_inducing {
                if let Some(kl) = &cache.kl {
                    // -∂KL/∂μ_k = -K⁻¹ μ_k ; -∂KL/∂L = K_d (diag(1/L_ii) − tril(K⁻¹ L))
                    let mu_bar = &mut g.mu[d];
                    for (gb, km) in mu_bar.as_mut_slice().iter_mut().zip(kl.kinv_mu.as_slice()) {
                        *gb -= km;
                    }
                    let kinv_l = kl.kinv.matmul(&cache.lq)?;
                    let lq_bar = &mut g.l_raw[d];
                    for i in 0..n_ind {
                        for j in 0..=i {
                            lq_bar[(i, j)] -= kd * kinv_l[(i, j)];
                        }
                        lq_bar[(i, i)] += kd / cache.lq[(i, i)];
                    }
                }
                // chain through L_ii = exp(raw_ii)
                let lq_bar = &mut g.l_raw[d];
                for i in 0..n_ind {
                    lq_bar[(i, i)] *= cache.lq[(i, i)];
                }
            }
            if want_latent {
                let mut kmm_bar = linalg::cholesky_backward(&cache.chol, &l_k_bar[d]);
                if let Some(kl) = &cache.kl {
                    // -∂KL/∂K_MM = ½ (K⁻¹ (K_d Σ + Σ_k μ_k μ_kᵀ) K⁻¹ − K_d K⁻¹)
                    let sigma = cache.lq.gram_outer();
                    let ks = kl.kinv.matmul(&sigma)?.matmul(&kl.kinv)?;
                    let mm = kl.kinv_mu.transpose().matmul(&kl.kinv_mu)?;
                    for i in 0..n_ind {
                        for j in 0..n_ind {
                            kmm_bar[(i, j)] += 0.5 * (kd * ks[(i, j)] + mm[(i, j)] - kd * kl.kinv[(i, j)]);
                        }
                    }
                }
                let mut z_bar_b = vec![0.0; z.len()];
                var.kernel.gram_backward(
                    z,
                    z,
                    q,
                    &cache.kmm,
                    &kmm_bar,
                    Some(g.inducing.as_mut_slice()),
                    Some(&mut z_bar_b),
                    &mut g.kernel[d],
                );
                for (gz, zb) in g.inducing.as_mut_slice().iter_mut().zip(&z_bar_b) {
                    *gz += zb;
                }
            }
        }
        if want_latent {
            let means = state.means.as_slice();
            let s = stds.as_slice();
            for (i, gm) in g.means.as_mut_slice().iter_mut().enumerate() {
                *gm -= means[i] * inv_var;
            }
            for (i, gs) in g.log_stds.as_mut_slice().iter_mut().enumerate() {
                *gs += 1.0 - s[i] * s[i] * inv_var;
            }
        }
    }

    let total: f64 = per_sample.iter().sum();
    let mean_loglik = total / samples as f64;
    let mc_std = if samples > 1 {
        let ss: f64 = per_sample.iter().map(|v| (v - mean_loglik) * (v - mean_loglik)).sum();
        (ss / (samples - 1) as f64).sqrt()
    } else {
        0.0
    };
    let report = ElboReport {
        elbo: -kl_x - kl_u + mean_loglik,
        kl_x,
        kl_u,
        mean_loglik,
        per_sample_loglik: per_sample,
        mc_std,
        clamped_b: clamped_total,
    };
    Ok((report, grads))
}
