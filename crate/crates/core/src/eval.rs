//! Test-set perplexity, the repetition-averaged experiment runner, and
//! delimited-text exports of latent embeddings and training traces.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{Baseline, BaselineError};
use crate::data::{format_dataset, AnswerKey};
use crate::model::{predictive_probs, CategoricalDataset, ModelError, PredictiveTable, VariationalState, DEFAULT_PREDICTIVE_SAMPLES};
use crate::optimizer::{train, IterationRecord, TrainConfig, TrainError, TrainingTrace, TRACE_COLUMNS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction for answer-key cell ({row}, {var})")]
    MissingPrediction { row: usize, var: usize },
    #[error("answer-key value {value} at ({row}, {var}) is outside the predicted categories")]
    ValueOutOfRange { row: usize, var: usize, value: usize },
    #[error("answer key is empty")]
    EmptyKey,
    #[error("repetition {rep} failed: {source}")]
    Repetition {
        rep: usize,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("malformed table at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Serializes non-finite values as the strings `"inf"` / `"nan"`.
fn serialize_real<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerplexityResult {
    /// `exp(-mean log p)`; `f64::INFINITY` when some true value got probability 0.
    #[serde(serialize_with = "serialize_real")]
    pub perplexity: f64,
    pub infinite: bool,
    pub per_cell_logprobs: Vec<f64>,
    pub n_cells: usize,
}

/// Perplexity of `predictions` on the cells of `key`.
pub fn perplexity(predictions: &PredictiveTable, key: &AnswerKey) -> Result<PerplexityResult, EvalError> {
    if key.is_empty() {
        return Err(EvalError::EmptyKey);
    }
    let mut per_cell_logprobs = Vec::with_capacity(key.len());
    for e in &key.entries {
        let p = predictions.get(e.row, e.var).ok_or(EvalError::MissingPrediction { row: e.row, var: e.var })?;
        let prob = *p.probs.get(e.value).ok_or(EvalError::ValueOutOfRange { row: e.row, var: e.var, value: e.value })?;
        per_cell_logprobs.push(prob.ln());
    }
    let infinite = per_cell_logprobs.iter().any(|l| *l == f64::NEG_INFINITY);
    let mean = per_cell_logprobs.iter().sum::<f64>() / per_cell_logprobs.len() as f64;
    let perplexity = if infinite { f64::INFINITY } else { (-mean).exp() };
    Ok(PerplexityResult { perplexity, infinite, per_cell_logprobs, n_cells: key.len() })
}

/// What to fit in each repetition.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Gp { config: TrainConfig, predictive_samples: usize },
    Baseline { baseline: Baseline },
}

impl ModelSpec {
    pub fn gp(config: TrainConfig) -> Self {
        ModelSpec::Gp { config, predictive_samples: DEFAULT_PREDICTIVE_SAMPLES }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Gp { config, .. } => config.model.name(),
            ModelSpec::Baseline { baseline } => baseline.name(),
        }
    }
}

/// Model fitted in one repetition, with its predictions on the key cells.
#[derive(Debug, Clone)]
pub struct FittedRepetition {
    pub seed: u64,
    pub predictions: PredictiveTable,
    /// `None` for baselines.
    pub fitted: Option<(VariationalState, TrainingTrace)>,
    pub bigram_fallbacks: usize,
}

/// Fits `model` on `visible` with `seed` and predicts every cell of `key`.
/// Predictive draws reuse the training seed.
pub fn fit_and_predict(
    model: &ModelSpec,
    visible: &CategoricalDataset,
    key: &AnswerKey,
    seed: u64,
    on_iteration: &mut dyn FnMut(&IterationRecord),
) -> Result<FittedRepetition, EvalError> {
    let targets = key.targets();
    match model {
        ModelSpec::Gp { config, predictive_samples } => {
            let config = TrainConfig { seed, ..config.clone() };
            let (state, trace) = train(visible, &config, on_iteration)?;
            let predictions = predictive_probs(&state, visible, &targets, *predictive_samples, seed)?;
            Ok(FittedRepetition { seed, predictions, fitted: Some((state, trace)), bigram_fallbacks: 0 })
        }
        ModelSpec::Baseline { baseline } => {
            let (predictions, bigram_fallbacks) = baseline.predict(visible, &targets)?;
            Ok(FittedRepetition { seed, predictions, fitted: None, bigram_fallbacks })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepetitionResult {
    pub rep: usize,
    pub seed: u64,
    #[serde(serialize_with = "serialize_real")]
    pub perplexity: f64,
    pub infinite: bool,
    pub final_elbo: Option<f64>,
    pub bigram_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub model: String,
    /// SHA-256 over the model spec, seed, repetition count, data and key.
    pub config_hash: String,
    pub seed: u64,
    pub repetitions: Vec<RepetitionResult>,
    /// Infinite whenever any repetition is.
    #[serde(serialize_with = "serialize_real")]
    pub mean: f64,
    /// Sample standard deviation over repetitions; 0 for a single one,
    /// infinite when the mean is.
    #[serde(serialize_with = "serialize_real")]
    pub std: f64,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn config_hash(model: &ModelSpec, data: &CategoricalDataset, key: &AnswerKey, repetitions: usize, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(model).expect("model spec serializes"));
    h.update(format!("\nseed={seed} repetitions={repetitions}\n"));
    h.update(format_dataset(data));
    h.update(key.to_csv());
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, mean);
    }
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fits `model` `repetitions` times (seeds `seed + rep`) on `visible` and
/// scores each fit against `key`.
pub fn run_experiment(
    model: &ModelSpec,
    visible: &CategoricalDataset,
    key: &AnswerKey,
    repetitions: usize,
    seed: u64,
) -> Result<ExperimentReport, EvalError> {
    let mut results = Vec::with_capacity(repetitions);
    for rep in 0..repetitions {
        let wrap = |e: EvalError| EvalError::Repetition { rep, source: Box::new(e) };
        let rep_seed = seed.wrapping_add(rep as u64);
        let fit = fit_and_predict(model, visible, key, rep_seed, &mut |_| {}).map_err(wrap)?;
        let p = perplexity(&fit.predictions, key).map_err(wrap)?;
        let final_elbo = fit.fitted.as_ref().and_then(|(_, t)| t.records.last()).map(|r| r.elbo);
        results.push(RepetitionResult {
            rep,
            seed: rep_seed,
            perplexity: p.perplexity,
            infinite: p.infinite,
            final_elbo,
            bigram_fallbacks: fit.bigram_fallbacks,
        });
    }
    let values: Vec<f64> = results.iter().map(|r| r.perplexity).collect();
    let (mean, std) = mean_and_std(&values);
    Ok(ExperimentReport {
        model: model.name().to_string(),
        config_hash: config_hash(model, visible, key, repetitions, seed),
        seed,
        repetitions: results,
        mean,
        std,
    })
}

/// Posterior latent means and standard deviations of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub row: usize,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// `row,m0..m{Q-1},s0..s{Q-1}` with one line per data row.
pub fn export_latents(state: &VariationalState) -> String {
    let q = state.latent_dim();
    let mut out = String::from("row");
    (0..q).for_each(|j| write!(out, ",m{j}").unwrap());
    (0..q).for_each(|j| write!(out, ",s{j}").unwrap());
    out.push('\n');
    let stds = state.stds();
    for n in 0..state.n_rows() {
        write!(out, "{n}").unwrap();
        state.means.row(n).iter().chain(stds.row(n)).for_each(|v| write!(out, ",{v}").unwrap());
        out.push('\n');
    }
    out
}

fn parse_err(line: usize, message: impl Into<String>) -> EvalError {
    EvalError::Parse { line, message: message.into() }
}

fn parse_reals(fields: &[&str], line: usize) -> Result<Vec<f64>, EvalError> {
    fields.iter().map(|f| f.trim().parse::<f64>().map_err(|_| parse_err(line, format!("bad number {f:?}")))).collect()
}

pub fn parse_latents(text: &str) -> Result<Vec<LatentRow>, EvalError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"row") || cols.len() % 2 == 0 {
        return Err(parse_err(1, "header must be row followed by matching m and s columns"));
    }
    let q = (cols.len() - 1) / 2;
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(parse_err(i + 1, format!("expected {} fields", cols.len())));
        }
        let row = fields[0].parse().map_err(|_| parse_err(i + 1, "bad row id"))?;
        let vals = parse_reals(&fields[1..], i + 1)?;
        rows.push(LatentRow { row, means: vals[..q].to_vec(), stds: vals[q..].to_vec() });
    }
    Ok(rows)
}

/// Assumption lines prefixed with `# `, then a header of [`TRACE_COLUMNS`]
/// and one line per iteration.
pub fn export_trace(trace: &TrainingTrace) -> String {
    let mut out = String::new();
    for a in &trace.assumptions {
        writeln!(out, "# {a}").unwrap();
    }
    out.push_str(&TRACE_COLUMNS.join(","));
    out.push('\n');
    for r in &trace.records {
        writeln!(out, "{},{},{},{},{},{}", r.iteration, r.elbo, r.kl_x, r.kl_u, r.mean_loglik, r.mc_std).unwrap();
    }
    out
}

pub fn parse_trace(text: &str) -> Result<TrainingTrace, EvalError> {
    let mut trace = TrainingTrace::default();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        if let Some(a) = line.strip_prefix('#') {
            trace.assumptions.push(a.trim_start().to_string());
            continue;
        }
        if !seen_header {
            if line != TRACE_COLUMNS.join(",") {
                return Err(parse_err(i + 1, "unexpected trace header"));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != TRACE_COLUMNS.len() {
            return Err(parse_err(i + 1, format!("expected {} fields", TRACE_COLUMNS.len())));
        }
        let iteration = fields[0].parse().map_err(|_| parse_err(i + 1, "bad iteration"))?;
        let v = parse_reals(&fields[1..], i + 1)?;
        trace.records.push(IterationRecord { iteration, elbo: v[0], kl_x: v[1], kl_u: v[2], mean_loglik: v[3], mc_std: v[4] });
    }
    if !seen_header {
        return Err(parse_err(1, "missing trace header"));
    }
    Ok(trace)
}

/// Mean silhouette coefficient of `points` under `labels` (Euclidean).
/// Points in singleton clusters contribute 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; n_labels];
        let mut counts = vec![0usize; n_labels];
        for (j, o) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, o);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..n_labels)
            .filter(|&l| l != own && counts[l] > 0)
            .map(|l| sums[l] / counts[l] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / points.len() as f64
}
