//! Reparameterized draws: every random quantity is a deterministic transform
//! of parameter-free standard normals.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{ModelError, VariationalState};
use crate::kernels::KernelParams;
use crate::linalg::{self, CholeskyFactor, DenseMatrix, JitterPolicy};

/// Dimensions of one batch of noise draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpsShape {
    pub samples: usize,
    pub rows: usize,
    pub latent_dim: usize,
    pub vars: usize,
    pub max_k: usize,
    pub inducing: usize,
}

impl EpsShape {
    pub fn for_state(state: &VariationalState, samples: usize) -> Self {
        Self {
            samples,
            rows: state.n_rows(),
            latent_dim: state.latent_dim(),
            vars: state.n_vars(),
            max_k: state.max_cardinality(),
            inducing: state.n_inducing(),
        }
    }
}

/// Standard-normal noise for `T` Monte Carlo samples:
/// `eps_x` is `T×N×Q`, `eps_u` is `T×D×K_max×M`, `eps_f` is `T×N×D×K_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonDraws {
    shape: EpsShape,
    eps_x: Vec<f64>,
    eps_u: Vec<f64>,
    eps_f: Vec<f64>,
}

impl EpsilonDraws {
    /// Draws `eps_x`, then `eps_u`, then `eps_f`, each in row-major order.
    pub fn draw<R: Rng + ?Sized>(shape: EpsShape, rng: &mut R) -> Self {
        let mut fill = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
        let eps_x = fill(shape.samples * shape.rows * shape.latent_dim);
        let eps_u = fill(shape.samples * shape.vars * shape.max_k * shape.inducing);
        let eps_f = fill(shape.samples * shape.rows * shape.vars * shape.max_k);
        Self { shape, eps_x, eps_u, eps_f }
    }

    pub fn zeros(shape: EpsShape) -> Self {
        Self {
            shape,
            eps_x: vec![0.0; shape.samples * shape.rows * shape.latent_dim],
            eps_u: vec![0.0; shape.samples * shape.vars * shape.max_k * shape.inducing],
            eps_f: vec![0.0; shape.samples * shape.rows * shape.vars * shape.max_k],
        }
    }

    /// Repeats the first sample `samples` times.
    pub fn replicate_first(&self, samples: usize) -> Self {
        let s = self.shape;
        let take = |v: &[f64], per: usize| v[..per].repeat(samples);
        Self {
            shape: EpsShape { samples, ..s },
            eps_x: take(&self.eps_x, s.rows * s.latent_dim),
            eps_u: take(&self.eps_u, s.vars * s.max_k * s.inducing),
            eps_f: take(&self.eps_f, s.rows * s.vars * s.max_k),
        }
    }

    pub fn shape(&self) -> EpsShape {
        self.shape
    }

    pub fn samples(&self) -> usize {
        self.shape.samples
    }

    /// `N × Q` latent noise of sample `t`.
    pub fn x(&self, t: usize) -> &[f64] {
        let per = self.shape.rows * self.shape.latent_dim;
        &self.eps_x[t * per..(t + 1) * per]
    }

    /// Length-`M` noise for `u_dk` of sample `t`.
    pub fn u(&self, t: usize, d: usize, k: usize) -> &[f64] {
        let s = self.shape;
        let start = ((t * s.vars + d) * s.max_k + k) * s.inducing;
        &self.eps_u[start..start + s.inducing]
    }

    /// Length-`K_max` noise for `f_nd` of sample `t`.
    pub fn f(&self, t: usize, n: usize, d: usize) -> &[f64] {
        let s = self.shape;
        let start = ((t * s.rows + n) * s.vars + d) * s.max_k;
        &self.eps_f[start..start + s.max_k]
    }

    pub fn x_mut(&mut self, t: usize) -> &mut [f64] {
        let per = self.shape.rows * self.shape.latent_dim;
        &mut self.eps_x[t * per..(t + 1) * per]
    }

    pub fn u_mut(&mut self, t: usize, d: usize, k: usize) -> &mut [f64] {
        let s = self.shape;
        let start = ((t * s.vars + d) * s.max_k + k) * s.inducing;
        &mut self.eps_u[start..start + s.inducing]
    }

    pub fn f_mut(&mut self, t: usize, n: usize, d: usize) -> &mut [f64] {
        let s = self.shape;
        let start = ((t * s.rows + n) * s.vars + d) * s.max_k;
        &mut self.eps_f[start..start + s.max_k]
    }
}

/// `x = m + exp(log_s) ⊙ ε`.
pub fn sample_x(means: &DenseMatrix, log_stds: &DenseMatrix, eps: &[f64]) -> DenseMatrix {
    let data = means
        .as_slice()
        .iter()
        .zip(log_stds.as_slice())
        .zip(eps)
        .map(|((m, ls), e)| m + ls.exp() * e)
        .collect();
    DenseMatrix::from_vec(means.rows(), means.cols(), data).expect("shape preserved")
}

/// `u = μ + L ε` with `L` lower triangular.
pub fn sample_u(mu: &[f64], l: &DenseMatrix, eps: &[f64]) -> Vec<f64> {
    (0..mu.len()).map(|i| mu[i] + linalg::dot(&l.row(i)[..=i], &eps[..=i])).collect()
}

/// `f_k = aᵀ u_k + √b ε_k`, with `u` stored as `M × K` columns.
pub fn sample_f(a_col: &[f64], b: f64, u: &DenseMatrix, eps: &[f64]) -> Vec<f64> {
    let sb = b.max(0.0).sqrt();
    (0..u.cols())
        .map(|k| (0..u.rows()).map(|m| a_col[m] * u[(m, k)]).sum::<f64>() + sb * eps[k])
        .collect()
}

/// Below this fraction of `K_nn`, the conditional variance `b` is treated as
/// zero. Linear kernels make `b` vanish exactly and round-off leaves ±1e-16.
pub(crate) const B_CLAMP_RTOL: f64 = 1e-10;

#[inline]
pub(crate) fn clamp_b(b: f64, knn: f64) -> Option<f64> {
    if b > B_CLAMP_RTOL * knn.abs() {
        Some(b)
    } else {
        None
    }
}

/// Sparse-GP conditional `p(f_n | u) = N(a_nᵀ u, b_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalCoeffs {
    /// `M × N`, column `n` is `K_MM⁻¹ K_Mn`.
    pub a: DenseMatrix,
    /// Clamped conditional variances.
    pub b: Vec<f64>,
    /// Variances before clamping.
    pub b_raw: Vec<f64>,
    pub clamped: usize,
    pub jitter_used: f64,
}

pub fn conditional_coeffs(kernel: &KernelParams, z: &DenseMatrix, x: &DenseMatrix) -> Result<ConditionalCoeffs, ModelError> {
    let q = z.cols();
    let kmm = kernel.gram(z.as_slice(), z.as_slice(), q);
    let chol = linalg::cholesky(&kmm, JitterPolicy::default())?;
    conditional_coeffs_with(kernel, &chol, z, x)
}

pub(crate) fn conditional_coeffs_with(
    kernel: &KernelParams,
    chol: &CholeskyFactor,
    z: &DenseMatrix,
    x: &DenseMatrix,
) -> Result<ConditionalCoeffs, ModelError> {
    let q = z.cols();
    let kmn = kernel.gram(z.as_slice(), x.as_slice(), q);
    let a = linalg::spd_solve(chol, &kmn)?;
    let knn = kernel.diag(x.as_slice(), q);
    let mut b = Vec::with_capacity(knn.len());
    let mut b_raw = Vec::with_capacity(knn.len());
    let mut clamped = 0;
    for (n, &kn) in knn.iter().enumerate() {
        let quad: f64 = (0..kmn.rows()).map(|m| kmn[(m, n)] * a[(m, n)]).sum();
        let raw = kn - quad;
        b_raw.push(raw);
        match clamp_b(raw, kn) {
            Some(v) => b.push(v),
            None => {
                clamped += 1;
                b.push(0.0);
            }
        }
    }
    Ok(ConditionalCoeffs { a, b, b_raw, clamped, jitter_used: chol.jitter_used() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ArdRbfParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rbf(sf2: f64, l: &[f64]) -> KernelParams {
        KernelParams::ArdRbf(ArdRbfParams::new(sf2, l))
    }

    #[test]
    fn interpolation_at_inducing_point() {
        let z = DenseMatrix::from_rows(&[vec![0.3, -0.2]]);
        let c = conditional_coeffs(&rbf(1.0, &[1.0, 1.0]), &z, &z).unwrap();
        assert_eq!(c.jitter_used, 0.0);
        assert!((c.a[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(c.b, vec![0.0]);
    }

    #[test]
    fn far_point_reverts_to_prior() {
        let z = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.5]]);
        let x = DenseMatrix::from_rows(&[vec![1e6, 1e6]]);
        let c = conditional_coeffs(&rbf(1.7, &[1.0, 1.0]), &z, &x).unwrap();
        assert!(c.a.as_slice().iter().all(|v| v.abs() < 1e-12));
        assert!((c.b[0] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn schur_complement_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let z = DenseMatrix::from_vec(6, 2, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let x = DenseMatrix::from_vec(10, 2, (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let c = conditional_coeffs(&rbf(1.2, &[0.9, 1.3]), &z, &x).unwrap();
            assert!(c.b_raw.iter().all(|&b| b >= -1e-9));
            assert_eq!(c.clamped, 0);
        }
    }

    #[test]
    fn sample_x_cases() {
        let m = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let ls = DenseMatrix::from_rows(&[vec![0.0, -1.0], vec![0.3, 0.0]]);
        assert_eq!(sample_x(&m, &ls, &[0.0; 4]), m);
        let tiny = DenseMatrix::from_rows(&[vec![-800.0, -800.0], vec![-800.0, -800.0]]);
        assert_eq!(sample_x(&m, &tiny, &[3.0, -2.0, 1.0, 5.0]), m);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let one_m = DenseMatrix::from_rows(&[vec![0.7]]);
        let one_ls = DenseMatrix::from_rows(&[vec![0.5f64.ln()]]);
        let draws = 100_000;
        let mean = (0..draws)
            .map(|_| sample_x(&one_m, &one_ls, &[rng.sample(StandardNormal)])[(0, 0)])
            .sum::<f64>()
            / draws as f64;
        assert!((mean - 0.7).abs() < 4.0 * 0.5 / (draws as f64).sqrt());
    }

    #[test]
    fn sample_u_cases() {
        let mu = [0.5, -0.5, 1.0];
        let l = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.3, 0.8, 0.0], vec![-0.2, 0.1, 0.5]]);
        assert_eq!(sample_u(&mu, &l, &[0.0; 3]), mu.to_vec());

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let draws = 100_000;
        let ident = DenseMatrix::identity(2);
        let mut cov = [[0.0; 2]; 2];
        let mut cross = 0.0;
        for _ in 0..draws {
            let e1: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let e2: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let u1 = sample_u(&[0.0, 0.0], &ident, &e1);
            let u2 = sample_u(&[0.0, 0.0], &ident, &e2);
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += u1[i] * u1[j];
                }
            }
            cross += u1[0] * u2[0];
        }
        for i in 0..2 {
            for j in 0..2 {
                let c = cov[i][j] / draws as f64;
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((c - target).abs() < 0.05, "{i}{j} {c}");
            }
        }
        assert!((cross / draws as f64).abs() < 0.05);
    }

    #[test]
    fn sample_f_cases() {
        let u = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        // b = 0, a picks the second inducing point
        assert_eq!(sample_f(&[0.0, 1.0], 0.0, &u, &[5.0, 5.0]), vec![3.0, 4.0]);
        assert_eq!(sample_f(&[0.5, 0.25], 2.0, &u, &[0.0, 0.0]), vec![1.25, 2.0]);
    }

    #[test]
    fn prior_marginal_variance() {
        let kernel = rbf(1.5, &[0.8, 1.1]);
        let z = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![0.5, -0.3], vec![-0.4, 0.6]]);
        let x = DenseMatrix::from_rows(&[vec![0.2, 0.1]]);
        let kmm = kernel.gram(z.as_slice(), z.as_slice(), 2);
        let chol = linalg::cholesky(&kmm, JitterPolicy::default()).unwrap();
        let c = conditional_coeffs_with(&kernel, &chol, &z, &x).unwrap();
        let a_col: Vec<f64> = (0..3).map(|m| c.a[(m, 0)]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 100_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let eu: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let u = sample_u(&[0.0; 3], chol.l(), &eu);
            let um = DenseMatrix::from_vec(3, 1, u).unwrap();
            let f = sample_f(&a_col, c.b[0], &um, &[rng.sample(StandardNormal)])[0];
            s1 += f;
            s2 += f * f;
        }
        let mean = s1 / draws as f64;
        let var = s2 / draws as f64 - mean * mean;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.5).abs() / 1.5 < 0.05);
    }

    #[test]
    fn replicated_draws_repeat() {
        let shape = EpsShape { samples: 3, rows: 2, latent_dim: 2, vars: 2, max_k: 3, inducing: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = EpsilonDraws::draw(shape, &mut rng).replicate_first(4);
        assert_eq!(e.samples(), 4);
        assert_eq!(e.x(0), e.x(3));
        assert_eq!(e.u(0, 1, 2), e.u(2, 1, 2));
        assert_eq!(e.f(0, 1, 1), e.f(3, 1, 1));
    }
}
