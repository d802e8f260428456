//! Frequency baselines: uniform, multinomial and Dirichlet-multinomial
//! (unigram and bigram) predictors for hidden cells.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CategoricalDataset, Prediction, PredictiveTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("variable {var} has no observed training values")]
    EmptyCounts { var: usize },
    #[error("invalid concentration {0:?}: expected a positive decimal")]
    InvalidConcentration(String),
    #[error("target ({row}, {var}) is outside the dataset")]
    UnknownTarget { row: usize, var: usize },
}

/// Dirichlet concentration held as an exact ratio `num / den`, so smoothed
/// probabilities are a single correctly rounded integer division.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concentration {
    num: u64,
    den: u64,
}

impl Concentration {
    pub fn from_ratio(num: u64, den: u64) -> Result<Self, BaselineError> {
        if num == 0 || den == 0 {
            return Err(BaselineError::InvalidConcentration(format!("{num}/{den}")));
        }
        Ok(Self { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn num(self) -> u64 {
        self.num
    }

    pub fn den(self) -> u64 {
        self.den
    }
}

impl FromStr for Concentration {
    type Err = BaselineError;

    /// Accepts plain decimals such as `1`, `0.01` or `2.5`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BaselineError::InvalidConcentration(s.to_string());
        let t = s.trim();
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if int.is_empty() && frac.is_empty() || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 18 {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int_part: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_part: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int_part.checked_mul(den).and_then(|v| v.checked_add(frac_part)).ok_or_else(bad)?;
        Self::from_ratio(num, den).map_err(|_| bad())
    }
}

impl fmt::Display for Concentration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

/// Observed-value counts of the training cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    /// `unigram[d][k]`: cells of variable `d` holding `k`.
    pub unigram: Vec<Vec<u64>>,
    /// `bigram[d][j][k]`: rows with `y_{d-1} = j` and `y_d = k`; empty for `d = 0`.
    pub bigram: Vec<Vec<Vec<u64>>>,
}

impl CountTable {
    /// Counts every observed cell; missing cells are skipped.
    pub fn build(data: &CategoricalDataset) -> Self {
        let cards = data.cardinalities();
        let mut unigram: Vec<Vec<u64>> = cards.iter().map(|&k| vec![0; k + 1]).collect();
        let mut bigram: Vec<Vec<Vec<u64>>> = cards
            .iter()
            .enumerate()
            .map(|(d, &k)| if d == 0 { Vec::new() } else { vec![vec![0; k + 1]; cards[d - 1] + 1] })
            .collect();
        for n in 0..data.n_rows() {
            let row = data.row(n);
            for (d, cell) in row.iter().enumerate() {
                let Some(k) = *cell else { continue };
                unigram[d][k] += 1;
                if d > 0 {
                    if let Some(j) = row[d - 1] {
                        bigram[d][j][k] += 1;
                    }
                }
            }
        }
        Self { unigram, bigram }
    }

    pub fn total(&self, d: usize) -> u64 {
        self.unigram[d].iter().sum()
    }
}

/// `1 / (K_d + 1)` for every category.
pub fn uniform_predict(cardinality: usize) -> Vec<f64> {
    vec![1.0 / (cardinality + 1) as f64; cardinality + 1]
}

/// Relative frequencies; unseen categories get probability 0.
pub fn multinomial_predict(counts: &CountTable, d: usize) -> Result<Vec<f64>, BaselineError> {
    let total = counts.total(d);
    if total == 0 {
        return Err(BaselineError::EmptyCounts { var: d });
    }
    Ok(counts.unigram[d].iter().map(|&c| c as f64 / total as f64).collect())
}

fn smoothed(counts: &[u64], alpha: Concentration) -> Vec<f64> {
    let (a, b) = (alpha.num as u128, alpha.den as u128);
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    let den = b * total + a * counts.len() as u128;
    counts.iter().map(|&c| (b * c as u128 + a) as f64 / den as f64).collect()
}

/// `(count_k + α) / (total + α (K_d + 1))`.
pub fn dirichlet_multinomial_predict(counts: &CountTable, d: usize, alpha: Concentration) -> Vec<f64> {
    smoothed(&counts.unigram[d], alpha)
}

/// Smoothed frequencies of variable `d` given the value of variable `d - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramPrediction {
    pub probs: Vec<f64>,
    /// The conditioning cell was missing (or `d = 0`), so the unigram
    /// estimate was used.
    pub fell_back: bool,
}

pub fn bigram_dirichlet_predict(
    counts: &CountTable,
    d: usize,
    conditioning: Option<usize>,
    alpha: Concentration,
) -> BigramPrediction {
    match conditioning {
        Some(j) if d > 0 => BigramPrediction { probs: smoothed(&counts.bigram[d][j], alpha), fell_back: false },
        _ => BigramPrediction { probs: dirichlet_multinomial_predict(counts, d, alpha), fell_back: true },
    }
}

/// A frequency model over the training cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Baseline {
    Uniform,
    Multinomial,
    DirMultUni { alpha: Concentration },
    DirMultBi { alpha: Concentration },
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Uniform => "uniform",
            Baseline::Multinomial => "multinomial",
            Baseline::DirMultUni { .. } => "dir-mult-uni",
            Baseline::DirMultBi { .. } => "dir-mult-bi",
        }
    }

    /// Predictions for `targets`, counting from the observed cells of `data`.
    /// Also returns how many bigram predictions fell back to the unigram.
    pub fn predict(
        &self,
        data: &CategoricalDataset,
        targets: &[(usize, usize)],
    ) -> Result<(PredictiveTable, usize), BaselineError> {
        let counts = CountTable::build(data);
        let mut fallbacks = 0;
        let mut entries = Vec::with_capacity(targets.len());
        for &(row, var) in targets {
            if row >= data.n_rows() || var >= data.n_vars() {
                return Err(BaselineError::UnknownTarget { row, var });
            }
            let probs = match *self {
                Baseline::Uniform => uniform_predict(data.cardinality(var)),
                Baseline::Multinomial => multinomial_predict(&counts, var)?,
                Baseline::DirMultUni { alpha } => dirichlet_multinomial_predict(&counts, var, alpha),
                Baseline::DirMultBi { alpha } => {
                    let cond = if var > 0 { data.cell(row, var - 1) } else { None };
                    let p = bigram_dirichlet_predict(&counts, var, cond, alpha);
                    fallbacks += usize::from(p.fell_back);
                    p.probs
                }
            };
            entries.push(Prediction { row, var, probs });
        }
        Ok((PredictiveTable { entries }, fallbacks))
    }
}
