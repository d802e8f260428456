//! Pathwise gradients of the Monte Carlo lower bound, and the central
//! difference harness that certifies them.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::DenseMatrix;
use crate::model::{self, CategoricalDataset, ElboReport, EpsilonDraws, ModelError, ParamGroup, VariationalState, Wants};

/// `∂ELBO/∂θ` laid out like [`VariationalState`].
///
/// `l_raw` holds derivatives with respect to the raw (log-diagonal)
/// parameterization; entries above the diagonal are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub means: DenseMatrix,
    pub log_stds: DenseMatrix,
    pub inducing: DenseMatrix,
    pub mu: Vec<DenseMatrix>,
    pub l_raw: Vec<DenseMatrix>,
    pub kernel: Vec<Vec<f64>>,
    /// Whether `kernel` takes part in [`pack`](Self::pack).
    pub kernel_free: bool,
}

impl GradientBundle {
    pub fn zeros_like(state: &VariationalState) -> Self {
        let (n, q, m) = (state.n_rows(), state.latent_dim(), state.n_inducing());
        Self {
            means: DenseMatrix::zeros(n, q),
            log_stds: DenseMatrix::zeros(n, q),
            inducing: DenseMatrix::zeros(m, q),
            mu: state.variables.iter().map(|v| DenseMatrix::zeros(v.mu.rows(), m)).collect(),
            l_raw: state.variables.iter().map(|_| DenseMatrix::zeros(m, m)).collect(),
            kernel: state.variables.iter().map(|v| vec![0.0; v.kernel.n_params()]).collect(),
            kernel_free: state.kernel_is_free(),
        }
    }

    /// Same ordering as [`VariationalState::pack`].
    pub fn pack(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::new();
        match group {
            ParamGroup::Latent => {
                out.extend_from_slice(self.means.as_slice());
                out.extend_from_slice(self.log_stds.as_slice());
                out.extend_from_slice(self.inducing.as_slice());
                if self.kernel_free {
                    for k in &self.kernel {
                        out.extend_from_slice(k);
                    }
                }
            }
            ParamGroup::Inducing => {
                for (mu, l) in self.mu.iter().zip(&self.l_raw) {
                    out.extend_from_slice(mu.as_slice());
                    for i in 0..l.rows() {
                        out.extend_from_slice(&l.row(i)[..=i]);
                    }
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.means.is_finite()
            && self.log_stds.is_finite()
            && self.inducing.is_finite()
            && self.mu.iter().all(DenseMatrix::is_finite)
            && self.l_raw.iter().all(DenseMatrix::is_finite)
            && self.kernel.iter().flatten().all(|v| v.is_finite())
    }
}

/// Value and full gradient of [`model::elbo`] under the same noise.
pub fn elbo_grad(
    state: &VariationalState,
    data: &CategoricalDataset,
    eps: &EpsilonDraws,
) -> Result<(ElboReport, GradientBundle), ModelError> {
    let (report, grads) = model::evaluate(state, data, eps, Some(Wants { latent: true, inducing: true }))?;
    Ok((report, grads.expect("gradients requested")))
}

/// Value and the gradient of one parameter group only; the other group's
/// entries in the bundle are left at zero.
pub fn elbo_grad_group(
    state: &VariationalState,
    data: &CategoricalDataset,
    eps: &EpsilonDraws,
    group: ParamGroup,
) -> Result<(ElboReport, GradientBundle), ModelError> {
    let wants = match group {
        ParamGroup::Latent => Wants { latent: true, inducing: false },
        ParamGroup::Inducing => Wants { latent: false, inducing: true },
    };
    let (report, grads) = model::evaluate(state, data, eps, Some(wants))?;
    Ok((report, grads.expect("gradients requested")))
}

/// One scalar comparison made by [`fd_check_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub group: ParamGroup,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_relative_error: f64,
}

/// Worst relative error between analytic and central-difference derivatives
/// over `sample_count` randomly chosen scalar parameters.
pub fn fd_check(
    state: &VariationalState,
    data: &CategoricalDataset,
    eps: &EpsilonDraws,
    h: f64,
    sample_count: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    Ok(fd_check_report(state, data, eps, h, sample_count, seed)?.max_relative_error)
}

pub fn fd_check_report(
    state: &VariationalState,
    data: &CategoricalDataset,
    eps: &EpsilonDraws,
    h: f64,
    sample_count: usize,
    seed: u64,
) -> Result<FdReport, ModelError> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, grads) = elbo_grad(state, data, eps)?;
    let groups = [ParamGroup::Latent, ParamGroup::Inducing];
    let packed: Vec<(Vec<f64>, Vec<f64>)> = groups.iter().map(|&g| (state.pack(g), grads.pack(g))).collect();
    let n_latent = packed[0].0.len();
    let total = n_latent + packed[1].0.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, total, sample_count.min(total)).into_vec();
    let mut entries = Vec::with_capacity(picks.len());
    let mut worst = 0.0f64;
    for flat in picks {
        let (gi, idx) = if flat < n_latent { (0, flat) } else { (1, flat - n_latent) };
        let group = groups[gi];
        let (values, analytic) = (&packed[gi].0, packed[gi].1[idx]);
        let mut probe = state.clone();
        let mut shifted = values.clone();
        shifted[idx] = values[idx] + h;
        probe.unpack(group, &shifted);
        let plus = model::elbo(&probe, data, eps)?.elbo;
        shifted[idx] = values[idx] - h;
        probe.unpack(group, &shifted);
        let minus = model::elbo(&probe, data, eps)?.elbo;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let relative_error = (analytic - numeric).abs() / denom;
        worst = worst.max(relative_error);
        entries.push(FdEntry { group, index: idx, analytic, numeric, relative_error });
    }
    Ok(FdReport { entries, max_relative_error: worst })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::kernels::{ArdRbfParams, KernelParams, LinearKernelParams};
    use crate::model::{EpsShape, ModelKind};
    use crate::optimizer::{init_state, TrainConfig};
    use rand::Rng;

    /// Small random instance with every parameter away from its initial
    /// symmetric values so that all gradient paths are exercised.
    pub(crate) fn random_instance(
        kind: ModelKind,
        n: usize,
        cards: &[usize],
        q: usize,
        m: usize,
        seed: u64,
    ) -> (VariationalState, CategoricalDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<Option<usize>>> = (0..n)
            .map(|_| {
                cards
                    .iter()
                    .map(|&k| if rng.gen_bool(0.15) { None } else { Some(rng.gen_range(0..=k)) })
                    .collect()
            })
            .collect();
        let data = CategoricalDataset::from_rows(cards.to_vec(), &rows).unwrap();
        let config = TrainConfig { model: kind, latent_dim: q, inducing: Some(m), seed, ..TrainConfig::default() };
        let mut state = init_state(&data, &config, &mut rng);
        for v in state.log_stds.as_mut_slice() {
            *v = rng.gen_range(-1.5..-0.5);
        }
        for v in state.inducing.as_mut_slice() {
            *v = rng.gen_range(-1.5..1.5);
        }
        for var in &mut state.variables {
            for v in var.mu.as_mut_slice() {
                *v = rng.gen_range(-1.0..1.0);
            }
            for i in 0..m {
                for j in 0..i {
                    var.l_raw[(i, j)] = rng.gen_range(-0.3..0.3);
                }
                var.l_raw[(i, i)] = rng.gen_range(-1.0..0.0);
            }
            var.kernel = match kind {
                ModelKind::Clgp => KernelParams::ArdRbf(ArdRbfParams::new(
                    rng.gen_range(0.5..2.0),
                    &(0..q).map(|_| rng.gen_range(0.7..1.5)).collect::<Vec<_>>(),
                )),
                ModelKind::Lgm => KernelParams::Linear(LinearKernelParams::new(rng.gen_range(0.5..2.0), Some(rng.gen_range(0.3..1.0)))),
            };
        }
        (state, data)
    }

    fn draws(state: &VariationalState, t: usize, seed: u64) -> EpsilonDraws {
        EpsilonDraws::draw(EpsShape::for_state(state, t), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn clgp_gradient_matches_central_differences() {
        for seed in 0..3 {
            let (state, data) = random_instance(ModelKind::Clgp, 8, &[3, 3], 2, 3, seed);
            let eps = draws(&state, 2, seed + 10);
            let n_total = state.n_params(ParamGroup::Latent) + state.n_params(ParamGroup::Inducing);
            let report = fd_check_report(&state, &data, &eps, 1e-5, n_total, seed).unwrap();
            let worst = report.entries.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error)).unwrap();
            assert!(report.max_relative_error < 1e-4, "seed {seed}: {worst:?}");
        }
    }

    #[test]
    fn lgm_gradient_matches_central_differences() {
        for seed in 0..3 {
            let (state, data) = random_instance(ModelKind::Lgm, 8, &[3, 3], 2, 3, seed);
            let eps = draws(&state, 2, seed + 10);
            let n_total = state.n_params(ParamGroup::Latent) + state.n_params(ParamGroup::Inducing);
            let report = fd_check_report(&state, &data, &eps, 1e-5, n_total, seed).unwrap();
            let worst = report.entries.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error)).unwrap();
            assert!(report.max_relative_error < 1e-4, "seed {seed}: {worst:?}");
        }
    }

    #[test]
    fn unobserved_variable_gets_only_the_kl_gradient() {
        let (state, data) = random_instance(ModelKind::Clgp, 8, &[3, 3], 2, 3, 11);
        let hidden: Vec<_> = (0..8).map(|n| (n, 1)).collect();
        let data = data.with_hidden(&hidden);
        let eps = draws(&state, 2, 1);
        let (_, g) = elbo_grad(&state, &data, &eps).unwrap();
        let v = &state.variables[1];
        let kmm = v.kernel.gram(state.inducing.as_slice(), state.inducing.as_slice(), 2);
        let chol = crate::linalg::cholesky(&kmm, crate::linalg::JitterPolicy::default()).unwrap();
        let expected = crate::linalg::spd_solve(&chol, &v.mu.transpose()).unwrap().transpose().scale(-1.0);
        assert!(g.mu[1].max_abs_diff(&expected) < 1e-9);

        let (lgm, data) = random_instance(ModelKind::Lgm, 8, &[3, 3], 2, 3, 11);
        let (_, g) = elbo_grad(&lgm, &data.with_hidden(&hidden), &draws(&lgm, 2, 1)).unwrap();
        assert!(g.mu[1].as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_mu_gradient_at_the_kl_minimum() {
        let (mut state, data) = random_instance(ModelKind::Clgp, 8, &[3, 3], 2, 3, 12);
        let data = data.with_hidden(&(0..8).map(|n| (n, 0)).collect::<Vec<_>>());
        let v = &mut state.variables[0];
        let kmm = v.kernel.gram(state.inducing.as_slice(), state.inducing.as_slice(), 2);
        let chol = crate::linalg::cholesky(&kmm, crate::linalg::JitterPolicy::default()).unwrap();
        v.set_chol_factor(chol.l());
        v.mu = DenseMatrix::zeros(v.mu.rows(), v.mu.cols());
        let (_, g) = elbo_grad(&state, &data, &draws(&state, 2, 3)).unwrap();
        assert!(g.mu[0].frobenius_norm() < 1e-12);
        assert!(g.l_raw[0].frobenius_norm() < 1e-9, "{:?}", g.l_raw[0]);
    }

    #[test]
    fn gradient_is_additive_over_disjoint_observations() {
        let (state, data) = random_instance(ModelKind::Clgp, 8, &[3, 3], 2, 3, 13);
        let eps = draws(&state, 2, 4);
        let all: Vec<_> = (0..8).flat_map(|n| [(n, 0), (n, 1)]).collect();
        let (first, second): (Vec<_>, Vec<_>) = all.iter().partition(|&&(n, _)| n < 4);
        let flat = |d: &CategoricalDataset| {
            let (_, g) = elbo_grad(&state, d, &eps).unwrap();
            [g.pack(ParamGroup::Latent), g.pack(ParamGroup::Inducing)].concat()
        };
        let full = flat(&data);
        let prior_only = flat(&data.with_hidden(&all));
        let only_second = flat(&data.with_hidden(&first));
        let only_first = flat(&data.with_hidden(&second));
        for i in 0..full.len() {
            let lhs = full[i] - prior_only[i];
            let rhs = (only_first[i] - prior_only[i]) + (only_second[i] - prior_only[i]);
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "entry {i}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn central_difference_error_shrinks_quadratically() {
        let (state, data) = random_instance(ModelKind::Clgp, 8, &[3, 3], 2, 3, 14);
        let eps = draws(&state, 2, 5);
        let coarse = fd_check_report(&state, &data, &eps, 1e-2, 30, 1).unwrap();
        let fine = fd_check_report(&state, &data, &eps, 1e-3, 30, 1).unwrap();
        let abs_err = |e: &FdEntry| (e.analytic - e.numeric).abs();
        let mut ratios: Vec<f64> = coarse
            .entries
            .iter()
            .zip(&fine.entries)
            .filter(|(c, _)| abs_err(c) > 1e-9)
            .map(|(c, f)| abs_err(f) / abs_err(c))
            .collect();
        ratios.sort_by(f64::total_cmp);
        let median = ratios[ratios.len() / 2];
        assert!((0.005..0.02).contains(&median), "median ratio {median}");
        let tiny = fd_check(&state, &data, &eps, 1e-5, 30, 1).unwrap();
        assert!(tiny < 1e-4 && fine.max_relative_error < 1e-2);
    }

    #[test]
    fn gradients_are_deterministic_and_value_matches_elbo() {
        let (state, data) = random_instance(ModelKind::Clgp, 8, &[3, 3], 2, 3, 15);
        let eps = draws(&state, 3, 6);
        let (r1, g1) = elbo_grad(&state, &data, &eps).unwrap();
        let (r2, g2) = elbo_grad(&state, &data, &eps).unwrap();
        assert_eq!((&r1, &g1), (&r2, &g2));
        assert_eq!(r1, model::elbo(&state, &data, &eps).unwrap());
        assert!(g1.is_finite());
    }

    #[test]
    fn group_gradients_match_the_full_bundle() {
        let (state, data) = random_instance(ModelKind::Clgp, 8, &[3, 3], 2, 3, 16);
        let eps = draws(&state, 2, 7);
        let (_, full) = elbo_grad(&state, &data, &eps).unwrap();
        for group in [ParamGroup::Latent, ParamGroup::Inducing] {
            let (_, part) = elbo_grad_group(&state, &data, &eps, group).unwrap();
            let (a, b) = (full.pack(group), part.pack(group));
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs())));
        }
    }
}
