//! Per-class loss weights.

use serde::{Deserialize, Serialize};

use crate::data::ClassCounts;
use crate::error::{Error, Result};

/// Positive per-class loss multipliers, normalized to mean 1 over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("weights", "empty weight vector"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::invalid("weights", format!("weights must be finite and > 0, got {w}")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    /// Rescale raw positive values to mean 1.
    fn mean_one(raw: Vec<f64>) -> Result<Self> {
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        Self::new(raw.into_iter().map(|w| w / mean).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("weights serialize")
    }
}

impl TryFrom<Vec<f64>> for ClassWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassWeights> for Vec<f64> {
    fn from(w: ClassWeights) -> Self {
        w.0
    }
}

/// `w_j ∝ 1 / n_j`.
pub fn inverse_frequency_weights(counts: &ClassCounts) -> ClassWeights {
    ClassWeights::mean_one(counts.as_slice().iter().map(|&n| 1.0 / n as f64).collect())
        .expect("positive counts give positive weights")
}

/// Class-balanced weights `w_j ∝ (1 - β) / (1 - β^{n_j})`, the inverse of the
/// effective number of samples.
pub fn effective_number_weights(counts: &ClassCounts, beta: f64) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid("beta", format!("must lie in [0, 1), got {beta}")));
    }
    // 1 - β^n computed as -expm1(n ln β) to survive β close to 1
    let raw = counts
        .as_slice()
        .iter()
        .map(|&n| {
            if beta == 0.0 {
                1.0
            } else {
                let ln_beta = beta.ln();
                ln_beta.exp_m1() / (n as f64 * ln_beta).exp_m1()
            }
        })
        .collect();
    ClassWeights::mean_one(raw)
}

/// Per-sample weights `w_{y_i} * m / Σ_i w_{y_i}`, which average exactly 1
/// over the batch.
pub fn renormalize_batch(weights: &ClassWeights, batch_labels: &[usize]) -> Result<Vec<f64>> {
    if batch_labels.is_empty() {
        return Err(Error::Empty("empty batch"));
    }
    let k = weights.0.len();
    if let Some(&y) = batch_labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid("batch_labels", format!("label {y} out of range for k = {k}")));
    }
    let raw: Vec<f64> = batch_labels.iter().map(|&y| weights.0[y]).collect();
    let sum: f64 = raw.iter().sum();
    let m = raw.len() as f64;
    Ok(raw.into_iter().map(|w| w * m / sum).collect())
}
