use super::ModelError;

/// `log(1 + Σ_k exp(f_k))`: log-normalizer of the Softmax whose reference
/// logit `f_0` is pinned to zero.
pub fn lse(f: &[f64]) -> f64 {
    let shift = f.iter().copied().fold(0.0, f64::max);
    let mut acc = (-shift).exp();
    for &v in f {
        acc += (v - shift).exp();
    }
    shift + acc.ln()
}

/// Log-probability of category `y ∈ 0..=K` under logits `(0, f_1..f_K)`.
pub fn log_softmax_prob(y: usize, f: &[f64]) -> Result<f64, ModelError> {
    if y > f.len() {
        return Err(ModelError::IndexOutOfRange { index: y, max: f.len() });
    }
    let fy = if y == 0 { 0.0 } else { f[y - 1] };
    Ok(fy - lse(f))
}

/// Full probability vector of length `K + 1`.
pub fn softmax_probs(f: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.len() + 1);
    softmax_into(f, &mut out);
    out
}

pub(crate) fn softmax_into(f: &[f64], out: &mut Vec<f64>) {
    let norm = lse(f);
    out.clear();
    out.push((-norm).exp());
    out.extend(f.iter().map(|v| (v - norm).exp()));
}
