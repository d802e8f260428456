//! Covariance functions over latent points.
//!
//! Point sets are passed as row-major `n × q` slices. Hyperparameters live in
//! the log domain so optimization is unconstrained.

use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;

/// ARD squared-exponential kernel:
/// `k(x, z) = σ_f² exp(-½ Σ_q ((x_q - z_q) / ℓ_q)²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdRbfParams {
    pub log_signal_variance: f64,
    pub log_lengthscales: Vec<f64>,
}

impl ArdRbfParams {
    pub fn new(signal_variance: f64, lengthscales: &[f64]) -> Self {
        Self {
            log_signal_variance: signal_variance.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
        }
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }
}

/// Linear kernel with optional bias: `k(x, z) = σ_f² x·z + σ_b²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearKernelParams {
    pub log_signal_variance: f64,
    /// `None` switches the bias term off entirely.
    pub log_bias_variance: Option<f64>,
}

impl LinearKernelParams {
    pub fn new(signal_variance: f64, bias_variance: Option<f64>) -> Self {
        Self { log_signal_variance: signal_variance.ln(), log_bias_variance: bias_variance.map(f64::ln) }
    }

    fn bias(&self) -> f64 {
        self.log_bias_variance.map_or(0.0, f64::exp)
    }
}

/// Kernel choice for one categorical variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelParams {
    ArdRbf(ArdRbfParams),
    Linear(LinearKernelParams),
}

impl KernelParams {
    pub fn n_params(&self) -> usize {
        match self {
            KernelParams::ArdRbf(p) => 1 + p.log_lengthscales.len(),
            KernelParams::Linear(p) => 1 + usize::from(p.log_bias_variance.is_some()),
        }
    }

    /// Log-domain hyperparameters in a fixed order (signal variance first).
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            KernelParams::ArdRbf(p) => {
                let mut v = vec![p.log_signal_variance];
                v.extend_from_slice(&p.log_lengthscales);
                v
            }
            KernelParams::Linear(p) => {
                let mut v = vec![p.log_signal_variance];
                v.extend(p.log_bias_variance);
                v
            }
        }
    }

    pub fn set_from_slice(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.n_params());
        match self {
            KernelParams::ArdRbf(p) => {
                p.log_signal_variance = values[0];
                p.log_lengthscales.copy_from_slice(&values[1..]);
            }
            KernelParams::Linear(p) => {
                p.log_signal_variance = values[0];
                if let Some(b) = p.log_bias_variance.as_mut() {
                    *b = values[1];
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }

    /// `K(A, B)` with `A` as rows.
    pub fn gram(&self, a: &[f64], b: &[f64], q: usize) -> DenseMatrix {
        match self {
            KernelParams::ArdRbf(p) => rbf_gram(p, a, b, q),
            KernelParams::Linear(p) => linear_gram(p, a, b, q),
        }
    }

    pub fn diag(&self, x: &[f64], q: usize) -> Vec<f64> {
        match self {
            KernelParams::ArdRbf(p) => rbf_diag(p, x, q),
            KernelParams::Linear(p) => linear_diag(p, x, q),
        }
    }

    /// Reverse-mode step through `K = gram(A, B)`.
    ///
    /// `k` must be the gram matrix produced for these inputs and `k_bar` its
    /// adjoint. Adds into `a_bar`, `b_bar` (when given) and `theta_bar`
    /// (ordered as [`KernelParams::to_vec`]).
    pub(crate) fn gram_backward(
        &self,
        a: &[f64],
        b: &[f64],
        q: usize,
        k: &DenseMatrix,
        k_bar: &DenseMatrix,
        mut a_bar: Option<&mut [f64]>,
        mut b_bar: Option<&mut [f64]>,
        theta_bar: &mut [f64],
    ) {
        let rows = k.rows();
        let cols = k.cols();
        match self {
            KernelParams::ArdRbf(p) => {
                let inv_l2: Vec<f64> = p.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect();
                let mut len_bar = vec![0.0; q];
                let mut ai_bar = vec![0.0; q];
                let mut sf_bar = 0.0;
                for i in 0..rows {
                    let ai = &a[i * q..(i + 1) * q];
                    ai_bar.iter_mut().for_each(|v| *v = 0.0);
                    for (j, (&kij, &gij)) in k.row(i).iter().zip(k_bar.row(i)).enumerate() {
                        let w = kij * gij;
                        if w == 0.0 {
                            continue;
                        }
                        sf_bar += w;
                        let bj = &b[j * q..(j + 1) * q];
                        let mut bj_bar = b_bar.as_deref_mut().map(|bb| &mut bb[j * q..(j + 1) * q]);
                        for c in 0..q {
                            let diff = ai[c] - bj[c];
                            let wd = w * diff * inv_l2[c];
                            len_bar[c] += wd * diff;
                            ai_bar[c] -= wd;
                            if let Some(bb) = bj_bar.as_deref_mut() {
                                bb[c] += wd;
                            }
                        }
                    }
                    if let Some(ab) = a_bar.as_deref_mut() {
                        for (slot, v) in ab[i * q..(i + 1) * q].iter_mut().zip(&ai_bar) {
                            *slot += v;
                        }
                    }
                }
                theta_bar[0] += sf_bar;
                for (t, v) in theta_bar[1..=q].iter_mut().zip(&len_bar) {
                    *t += v;
                }
            }
            KernelParams::Linear(p) => {
                let sf2 = p.log_signal_variance.exp();
                let sb2 = p.bias();
                for i in 0..rows {
                    let ai = &a[i * q..(i + 1) * q];
                    let kbar_row = k_bar.row(i);
                    for j in 0..cols {
                        let g = kbar_row[j];
                        if g == 0.0 {
                            continue;
                        }
                        let bj = &b[j * q..(j + 1) * q];
                        let dotp: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                        theta_bar[0] += g * sf2 * dotp;
                        if p.log_bias_variance.is_some() {
                            theta_bar[1] += g * sb2;
                        }
                        if let Some(ab) = a_bar.as_deref_mut() {
                            for c in 0..q {
                                ab[i * q + c] += g * sf2 * bj[c];
                            }
                        }
                        if let Some(bb) = b_bar.as_deref_mut() {
                            for c in 0..q {
                                bb[j * q + c] += g * sf2 * ai[c];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Reverse-mode step through `diag(K(X, X))`.
    pub(crate) fn diag_backward(&self, x: &[f64], q: usize, d_bar: &[f64], x_bar: Option<&mut [f64]>, theta_bar: &mut [f64]) {
        match self {
            KernelParams::ArdRbf(p) => {
                let sf2 = p.log_signal_variance.exp();
                theta_bar[0] += sf2 * d_bar.iter().sum::<f64>();
            }
            KernelParams::Linear(p) => {
                let sf2 = p.log_signal_variance.exp();
                let sb2 = p.bias();
                let mut xb = x_bar;
                for (n, &g) in d_bar.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let xn = &x[n * q..(n + 1) * q];
                    let sq: f64 = xn.iter().map(|v| v * v).sum();
                    theta_bar[0] += g * sf2 * sq;
                    if p.log_bias_variance.is_some() {
                        theta_bar[1] += g * sb2;
                    }
                    if let Some(xb) = xb.as_deref_mut() {
                        for c in 0..q {
                            xb[n * q + c] += 2.0 * g * sf2 * xn[c];
                        }
                    }
                }
            }
        }
    }
}

/// Below this `exp` returns exactly zero, so the call can be skipped.
const EXP_UNDERFLOW: f64 = -746.0;

pub fn rbf_gram(params: &ArdRbfParams, x: &[f64], z: &[f64], q: usize) -> DenseMatrix {
    assert_eq!(params.log_lengthscales.len(), q, "lengthscale count must match latent dimension");
    let n = x.len() / q;
    let m = z.len() / q;
    let sf2 = params.signal_variance();
    let inv_l: Vec<f64> = params.log_lengthscales.iter().map(|l| (-l).exp()).collect();
    let xs: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * inv_l[i % q]).collect();
    let zs: Vec<f64> = z.iter().enumerate().map(|(i, v)| v * inv_l[i % q]).collect();
    let mut out = DenseMatrix::zeros(n, m);
    for i in 0..n {
        let xi = &xs[i * q..(i + 1) * q];
        let row = out.row_mut(i);
        for (j, slot) in row.iter_mut().enumerate() {
            let zj = &zs[j * q..(j + 1) * q];
            let d2: f64 = xi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum();
            let arg = -0.5 * d2;
            *slot = if arg < EXP_UNDERFLOW { 0.0 } else { sf2 * arg.exp() };
        }
    }
    out
}

pub fn rbf_diag(params: &ArdRbfParams, x: &[f64], q: usize) -> Vec<f64> {
    vec![params.signal_variance(); if q == 0 { 0 } else { x.len() / q }]
}

pub fn linear_gram(params: &LinearKernelParams, x: &[f64], z: &[f64], q: usize) -> DenseMatrix {
    let n = x.len() / q;
    let m = z.len() / q;
    let sf2 = params.log_signal_variance.exp();
    let sb2 = params.bias();
    let mut out = DenseMatrix::zeros(n, m);
    for i in 0..n {
        let xi = &x[i * q..(i + 1) * q];
        for j in 0..m {
            let zj = &z[j * q..(j + 1) * q];
            out[(i, j)] = sf2 * xi.iter().zip(zj).map(|(a, b)| a * b).sum::<f64>() + sb2;
        }
    }
    out
}

pub fn linear_diag(params: &LinearKernelParams, x: &[f64], q: usize) -> Vec<f64> {
    let sf2 = params.log_signal_variance.exp();
    let sb2 = params.bias();
    x.chunks(q).map(|xn| sf2 * xn.iter().map(|v| v * v).sum::<f64>() + sb2).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, q: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * q).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    /// Smallest eigenvalue by Jacobi rotations (test oracle).
    fn min_eigenvalue(a: &DenseMatrix) -> f64 {
        let n = a.rows();
        let mut m = a.clone();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for r in (p + 1)..n {
                    off += m[(p, r)] * m[(p, r)];
                    if m[(p, r)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = 0.5 * (m[(r, r)] - m[(p, p)]) / m[(p, r)];
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (mkp, mkr) = (m[(k, p)], m[(k, r)]);
                        m[(k, p)] = c * mkp - s * mkr;
                        m[(k, r)] = s * mkp + c * mkr;
                    }
                    for k in 0..n {
                        let (mpk, mrk) = (m[(p, k)], m[(r, k)]);
                        m[(p, k)] = c * mpk - s * mrk;
                        m[(r, k)] = s * mpk + c * mrk;
                    }
                }
            }
            if off < 1e-24 {
                break;
            }
        }
        m.diag().into_iter().fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn rbf_zero_distance() {
        let p = ArdRbfParams::new(2.5, &[0.3, 1.0]);
        let g = rbf_gram(&p, &[0.1, 0.2], &[0.1, 0.2], 2);
        assert!((g[(0, 0)] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn rbf_unit_distance() {
        let p = ArdRbfParams::new(1.0, &[1.0]);
        let g = rbf_gram(&p, &[0.0], &[1.0], 1);
        assert!((g[(0, 0)] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((g[(0, 0)] - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn long_lengthscale_switches_dimension_off() {
        let p = ArdRbfParams::new(1.0, &[0.7, 1e9]);
        let x = random_points(5, 2, 1);
        let z = random_points(4, 2, 2);
        let mut x_shuffled = x.clone();
        for i in 0..5 {
            x_shuffled[i * 2 + 1] = x[((i + 2) % 5) * 2 + 1];
        }
        let a = rbf_gram(&p, &x, &z, 2);
        let b = rbf_gram(&p, &x_shuffled, &z, 2);
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn rbf_diag_is_signal_variance() {
        let p = ArdRbfParams::new(2.0, &[0.5, 0.5]);
        let x = random_points(6, 2, 3);
        assert!(rbf_diag(&p, &x, 2).iter().all(|v| (v - 2.0).abs() < 1e-15));
        let g = rbf_gram(&p, &x, &x, 2);
        for (i, v) in rbf_diag(&p, &x, 2).iter().enumerate() {
            assert_eq!(*v, g[(i, i)]);
        }
        assert!(rbf_diag(&p, &[], 2).is_empty());
    }

    #[test]
    fn linear_cases() {
        let p = LinearKernelParams::new(1.0, Some(0.3));
        let g = linear_gram(&p, &[0.0, 0.0], &[0.0, 0.0], 2);
        assert!((g[(0, 0)] - 0.3).abs() < 1e-15);
        let p = LinearKernelParams::new(1.0, None);
        let g = linear_gram(&p, &[1.0, 2.0], &[3.0, 4.0], 2);
        assert_eq!(g[(0, 0)], 11.0);
        let p = LinearKernelParams::new(0.7, Some(0.2));
        let x = random_points(5, 3, 9);
        let g = linear_gram(&p, &x, &x, 3);
        assert_eq!(g, g.transpose());
        let d = linear_diag(&p, &x, 3);
        for i in 0..5 {
            assert!((d[i] - g[(i, i)]).abs() < 1e-14);
        }
    }

    #[test]
    fn grams_are_psd() {
        for seed in 0..20 {
            let x = random_points(6, 2, seed);
            let rbf = ArdRbfParams::new(1.3, &[0.8, 1.7]);
            assert!(min_eigenvalue(&rbf_gram(&rbf, &x, &x, 2)) >= -1e-9);
            let lin = LinearKernelParams::new(0.9, Some(0.4));
            assert!(min_eigenvalue(&linear_gram(&lin, &x, &x, 2)) >= -1e-9);
        }
    }

    #[test]
    fn rbf_entries_bounded() {
        let p = ArdRbfParams::new(1.7, &[0.4, 0.9]);
        let x = random_points(7, 2, 5);
        let z = random_points(5, 2, 6);
        let g = rbf_gram(&p, &x, &z, 2);
        for v in g.as_slice() {
            assert!(*v > 0.0 && *v < 1.7);
        }
    }

    fn check_gram_gradients(kernel: KernelParams, seed: u64) {
        let q = 2;
        let a = random_points(4, q, seed);
        let b = random_points(3, q, seed + 100);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
        let w = DenseMatrix::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let objective = |kp: &KernelParams, a: &[f64], b: &[f64]| -> f64 {
            kp.gram(a, b, q).as_slice().iter().zip(w.as_slice()).map(|(x, y)| x * y).sum()
        };
        let k = kernel.gram(&a, &b, q);
        let mut a_bar = vec![0.0; a.len()];
        let mut b_bar = vec![0.0; b.len()];
        let mut t_bar = vec![0.0; kernel.n_params()];
        kernel.gram_backward(&a, &b, q, &k, &w, Some(&mut a_bar), Some(&mut b_bar), &mut t_bar);
        let h = 1e-6;
        let rel = |num: f64, ana: f64| (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
        let theta = kernel.to_vec();
        for i in 0..theta.len() {
            let mut kp = kernel.clone();
            let mut kmn = kernel.clone();
            let mut t = theta.clone();
            t[i] += h;
            kp.set_from_slice(&t);
            t[i] -= 2.0 * h;
            kmn.set_from_slice(&t);
            let num = (objective(&kp, &a, &b) - objective(&kmn, &a, &b)) / (2.0 * h);
            assert!(rel(num, t_bar[i]) < 1e-5, "theta {i}: {num} vs {}", t_bar[i]);
        }
        for i in 0..a.len() {
            let mut ap = a.clone();
            ap[i] += h;
            let mut am = a.clone();
            am[i] -= h;
            let num = (objective(&kernel, &ap, &b) - objective(&kernel, &am, &b)) / (2.0 * h);
            assert!(rel(num, a_bar[i]) < 1e-5, "a {i}: {num} vs {}", a_bar[i]);
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let num = (objective(&kernel, &a, &bp) - objective(&kernel, &a, &bm)) / (2.0 * h);
            assert!(rel(num, b_bar[i]) < 1e-5, "b {i}: {num} vs {}", b_bar[i]);
        }
        // diagonal
        let dw: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dobj = |kp: &KernelParams, a: &[f64]| -> f64 { kp.diag(a, q).iter().zip(&dw).map(|(x, y)| x * y).sum() };
        let mut x_bar = vec![0.0; a.len()];
        let mut t_bar = vec![0.0; kernel.n_params()];
        kernel.diag_backward(&a, q, &dw, Some(&mut x_bar), &mut t_bar);
        for i in 0..theta.len() {
            let mut kp = kernel.clone();
            let mut km = kernel.clone();
            let mut t = theta.clone();
            t[i] += h;
            kp.set_from_slice(&t);
            t[i] -= 2.0 * h;
            km.set_from_slice(&t);
            let num = (dobj(&kp, &a) - dobj(&km, &a)) / (2.0 * h);
            assert!((num - t_bar[i]).abs() < 1e-6 * (1.0 + num.abs()), "diag theta {i}");
        }
        for i in 0..a.len() {
            let mut ap = a.clone();
            ap[i] += h;
            let mut am = a.clone();
            am[i] -= h;
            let num = (dobj(&kernel, &ap) - dobj(&kernel, &am)) / (2.0 * h);
            assert!((num - x_bar[i]).abs() < 1e-6 * (1.0 + num.abs()), "diag x {i}");
        }
    }

    #[test]
    fn rbf_gradients_match_finite_differences() {
        for seed in 0..5 {
            check_gram_gradients(KernelParams::ArdRbf(ArdRbfParams::new(1.4, &[0.9, 1.6])), seed);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        for seed in 0..5 {
            check_gram_gradients(KernelParams::Linear(LinearKernelParams::new(0.8, Some(0.5))), seed);
            check_gram_gradients(KernelParams::Linear(LinearKernelParams::new(1.2, None)), seed);
        }
    }
}
