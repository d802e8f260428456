//! RMSPROP, the initialization recipe, and the alternating training loop.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradients::{elbo_grad, elbo_grad_group};
use crate::kernels::{ArdRbfParams, KernelParams, LinearKernelParams};
use crate::linalg::DenseMatrix;
use crate::model::{
    CategoricalDataset, ElboReport, EpsShape, EpsilonDraws, ModelError, ModelKind, ParamGroup, VariableParams,
    VariationalState,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("lower bound became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub decay: f64,
    pub learning_rate: f64,
    /// Learning rate is multiplied by this every `lr_decay_every` iterations.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub eps_stab: f64,
    /// Learning-rate multiplier for the inducing-output group.
    pub inducing_lr_scale: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { decay: 0.9, learning_rate: 0.01, lr_decay_factor: 0.5, lr_decay_every: 250, eps_stab: 1e-6, inducing_lr_scale: 1.0 }
    }
}

impl RmsPropConfig {
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let halvings = if self.lr_decay_every == 0 { 0 } else { iteration / self.lr_decay_every };
        self.learning_rate * self.lr_decay_factor.powi(halvings as i32)
    }
}

/// Running mean of squared gradients for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub accumulators: Vec<f64>,
    pub decay: f64,
    pub learning_rate: f64,
    pub eps_stab: f64,
}

impl RmsPropState {
    pub fn new(len: usize, config: &RmsPropConfig) -> Self {
        Self {
            accumulators: vec![0.0; len],
            decay: config.decay,
            learning_rate: config.learning_rate,
            eps_stab: config.eps_stab,
        }
    }
}

/// One ascent step:
/// `acc ← ρ acc + (1 − ρ) g²`, `θ ← θ + η g / (√acc + ε)`.
pub fn rmsprop_step(params: &mut [f64], grads: &[f64], state: &mut RmsPropState) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.accumulators.len());
    let (rho, eta, eps) = (state.decay, state.learning_rate, state.eps_stab);
    for ((p, &g), acc) in params.iter_mut().zip(grads).zip(state.accumulators.iter_mut()) {
        *acc = rho * *acc + (1.0 - rho) * g * g;
        *p += eta * g / (acc.sqrt() + eps);
    }
}

/// Initial values for the free parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitRecipe {
    pub latent_std: f64,
    pub mu_std: f64,
    pub lengthscale: f64,
    pub signal_variance: f64,
    /// Diagonal of the initial `L_d`.
    pub chol_diag: f64,
    /// Linear kernel: include the bias variance term.
    pub linear_bias: bool,
    pub bias_variance: f64,
}

impl Default for InitRecipe {
    fn default() -> Self {
        Self {
            latent_std: 0.1,
            mu_std: 1e-2,
            lengthscale: 0.1,
            signal_variance: 1.0,
            chol_diag: 0.1,
            linear_bias: true,
            bias_variance: 1.0,
        }
    }
}

pub const DEFAULT_CLGP_INDUCING: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub latent_dim: usize,
    /// `None` picks [`DEFAULT_CLGP_INDUCING`] for the CLGP and `Q + 1` for the
    /// linear model (a linear kernel has rank `Q + 1`).
    pub inducing: Option<usize>,
    pub mc_samples: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Alternate latent-group and inducing-group half steps; otherwise take a
    /// joint step on both groups per iteration.
    pub alternate_groups: bool,
    pub optimize_hyperparams: bool,
    pub sigma_x: f64,
    pub init: InitRecipe,
    pub rmsprop: RmsPropConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Clgp,
            latent_dim: 2,
            inducing: None,
            mc_samples: 20,
            iterations: 500,
            seed: 0,
            alternate_groups: true,
            optimize_hyperparams: true,
            sigma_x: 1.0,
            init: InitRecipe::default(),
            rmsprop: RmsPropConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_model(model: ModelKind) -> Self {
        Self { model, ..Self::default() }
    }

    pub fn inducing_count(&self) -> usize {
        self.inducing.unwrap_or(match self.model {
            ModelKind::Clgp => DEFAULT_CLGP_INDUCING,
            ModelKind::Lgm => self.latent_dim + 1,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent dimension must be positive");
        }
        if self.inducing_count() == 0 {
            return bad("need at least one inducing point");
        }
        if self.mc_samples == 0 {
            return bad("need at least one Monte Carlo sample");
        }
        if !(self.sigma_x > 0.0) {
            return bad("sigma_x must be positive");
        }
        let r = &self.rmsprop;
        if !(r.learning_rate > 0.0 && r.decay > 0.0 && r.decay < 1.0 && r.eps_stab > 0.0 && r.lr_decay_factor > 0.0) {
            return bad("RMSPROP hyperparameters must be positive with decay in (0, 1)");
        }
        let i = &self.init;
        if !(i.latent_std > 0.0 && i.mu_std >= 0.0 && i.lengthscale > 0.0 && i.signal_variance > 0.0 && i.chol_diag > 0.0)
        {
            return bad("initialization constants must be positive");
        }
        Ok(())
    }

    /// Header lines recording the constants that the training recipe fixes.
    pub fn assumptions(&self) -> Vec<String> {
        let r = &self.rmsprop;
        vec![
            format!(
                "rmsprop decay={} learning_rate={} lr_decay_factor={} lr_decay_every={} eps_stab={}",
                r.decay, r.learning_rate, r.lr_decay_factor, r.lr_decay_every, r.eps_stab
            ),
            format!(
                "schedule={} fresh_noise_per_half_step=true optimize_hyperparams={}",
                if self.alternate_groups { "alternating" } else { "joint" },
                self.optimize_hyperparams
            ),
            format!(
                "model={} latent_dim={} inducing={} mc_samples={} iterations={} seed={} sigma_x={}",
                self.model.name(),
                self.latent_dim,
                self.inducing_count(),
                self.mc_samples,
                self.iterations,
                self.seed,
                self.sigma_x
            ),
        ]
    }
}

/// Draws the initial variational state.
///
/// Latent means ~ N(0, 1); latent stds, lengthscales, `μ` spread and the
/// diagonal of `L_d` follow `config.init`. Inducing inputs are distinct rows of
/// the initial means when `M ≤ N`, otherwise standard-normal draws.
pub fn init_state<R: Rng + ?Sized>(data: &CategoricalDataset, config: &TrainConfig, rng: &mut R) -> VariationalState {
    let n = data.n_rows();
    let q = config.latent_dim;
    let m = config.inducing_count();
    let init = &config.init;

    let means_data: Vec<f64> = (0..n * q).map(|_| rng.sample(StandardNormal)).collect();
    let means = DenseMatrix::from_vec(n, q, means_data).expect("shape");
    let log_stds = DenseMatrix::from_vec(n, q, vec![init.latent_std.ln(); n * q]).expect("shape");

    let mut inducing = DenseMatrix::zeros(m, q);
    if m <= n {
        for (row, src) in index::sample(rng, n, m).into_iter().enumerate() {
            inducing.row_mut(row).copy_from_slice(means.row(src));
        }
    } else {
        for v in inducing.as_mut_slice() {
            *v = rng.sample(StandardNormal);
        }
    }

    let variables = data
        .cardinalities()
        .iter()
        .map(|&kd| {
            let mu_data = (0..kd * m).map(|_| init.mu_std * rng.sample::<f64, _>(StandardNormal)).collect();
            let mu = DenseMatrix::from_vec(kd, m, mu_data).expect("shape");
            let mut l_raw = DenseMatrix::zeros(m, m);
            for i in 0..m {
                l_raw[(i, i)] = init.chol_diag.ln();
            }
            let kernel = match config.model {
                ModelKind::Clgp => KernelParams::ArdRbf(ArdRbfParams::new(init.signal_variance, &vec![init.lengthscale; q])),
                ModelKind::Lgm => KernelParams::Linear(LinearKernelParams::new(
                    init.signal_variance,
                    init.linear_bias.then_some(init.bias_variance),
                )),
            };
            VariableParams { mu, l_raw, kernel }
        })
        .collect();

    VariationalState { kind: config.model, sigma_x: config.sigma_x, means, log_stds, inducing, variables }
}

/// Diagnostics of one training iteration (from its latent-group evaluation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub elbo: f64,
    pub kl_x: f64,
    pub kl_u: f64,
    pub mean_loglik: f64,
    pub mc_std: f64,
}

impl IterationRecord {
    fn from_report(iteration: usize, r: &ElboReport) -> Self {
        Self { iteration, elbo: r.elbo, kl_x: r.kl_x, kl_u: r.kl_u, mean_loglik: r.mean_loglik, mc_std: r.mc_std }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub assumptions: Vec<String>,
    pub records: Vec<IterationRecord>,
}

pub const TRACE_COLUMNS: [&str; 6] = ["iteration", "elbo", "kl_x", "kl_u", "mean_loglik", "mc_std"];

/// Runs the alternating RMSPROP schedule from a fresh initialization.
///
/// The seed drives initialization and every noise draw, so a run is
/// reproducible from `(data, config)`. `on_iteration` sees each record as it
/// is produced.
pub fn train(
    data: &CategoricalDataset,
    config: &TrainConfig,
    on_iteration: &mut dyn FnMut(&IterationRecord),
) -> Result<(VariationalState, TrainingTrace), TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = init_state(data, config, &mut rng);
    let shape = EpsShape::for_state(&state, config.mc_samples);
    let mut trace = TrainingTrace { assumptions: config.assumptions(), records: Vec::with_capacity(config.iterations) };

    let mut opt_latent = RmsPropState::new(state.n_params(ParamGroup::Latent), &config.rmsprop);
    let mut opt_inducing = RmsPropState::new(state.n_params(ParamGroup::Inducing), &config.rmsprop);
    let n_kernel = state.n_free_kernel_params();
    let frozen_tail = |group: ParamGroup| match group {
        ParamGroup::Latent if !config.optimize_hyperparams => n_kernel,
        _ => 0,
    };

    for iteration in 0..config.iterations {
        let lr = config.rmsprop.learning_rate_at(iteration);
        opt_latent.learning_rate = lr;
        opt_inducing.learning_rate = lr * config.rmsprop.inducing_lr_scale;

        let report = if config.alternate_groups {
            let mut first = None;
            for (group, opt) in [(ParamGroup::Latent, &mut opt_latent), (ParamGroup::Inducing, &mut opt_inducing)] {
                let eps = EpsilonDraws::draw(shape, &mut rng);
                let (report, grads) = elbo_grad_group(&state, data, &eps, group)?;
                check_finite(&report, iteration)?;
                apply_step(&mut state, group, grads.pack(group), opt, frozen_tail(group), iteration)?;
                first.get_or_insert(report);
            }
            first.expect("two half steps ran")
        } else {
            let eps = EpsilonDraws::draw(shape, &mut rng);
            let (report, grads) = elbo_grad(&state, data, &eps)?;
            check_finite(&report, iteration)?;
            for (group, opt) in [(ParamGroup::Latent, &mut opt_latent), (ParamGroup::Inducing, &mut opt_inducing)] {
                apply_step(&mut state, group, grads.pack(group), opt, frozen_tail(group), iteration)?;
            }
            report
        };
        let record = IterationRecord::from_report(iteration, &report);
        on_iteration(&record);
        trace.records.push(record);
    }
    Ok((state, trace))
}

/// Zeroes the last `frozen_tail` gradient entries (the kernel
/// hyperparameters when they are held fixed) and takes one RMSPROP step.
fn apply_step(
    state: &mut VariationalState,
    group: ParamGroup,
    mut grads: Vec<f64>,
    opt: &mut RmsPropState,
    frozen_tail: usize,
    iteration: usize,
) -> Result<(), TrainError> {
    let len = grads.len();
    grads[len - frozen_tail..].iter_mut().for_each(|g| *g = 0.0);
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite { iteration });
    }
    let mut params = state.pack(group);
    rmsprop_step(&mut params, &grads, opt);
    state.unpack(group, &params);
    Ok(())
}

fn check_finite(report: &ElboReport, iteration: usize) -> Result<(), TrainError> {
    if report.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite { iteration })
    }
}
