//! Closed-form calculators for the class-margin trade-off.
//!
//! The balanced generalization bound is evaluated with its hidden constants
//! fixed to one and the hypothesis-class complexity supplied as a scalar; only
//! relative comparisons between margin profiles are meaningful. The bound's
//! `ε_j` term depends on the range of the hypothesis class and is not
//! computed.
//!
//! For `k > 2` the optimal profile uses the `γ_j ∝ n_j^{-1/4}` rule obtained
//! from the two-class analysis; it is not claimed to be the exact `k`-class
//! optimum. (Under fast-rate bounds the analogous rule is
//! `γ_j ∝ n_j^{-1/3}`; see the `exponent` argument of
//! [`crate::losses::compute_ldam_margins`].)

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::{ClassCounts, Dataset};
use crate::error::{Error, Result};
use crate::losses::MarginVector;
use crate::model::NormalizedClassifier;

/// Positive per-class margins `γ_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MarginProfile(Vec<f64>);

impl MarginProfile {
    pub fn new(gammas: Vec<f64>) -> Result<Self> {
        if gammas.is_empty() {
            return Err(Error::invalid("gammas", "empty profile"));
        }
        if let Some(g) = gammas.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
            return Err(Error::invalid("gammas", format!("margins must be positive, got {g}")));
        }
        Ok(Self(gammas))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for MarginProfile {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MarginProfile> for Vec<f64> {
    fn from(p: MarginProfile) -> Self {
        p.0
    }
}

/// The two-class objective `1/(γ1 √n1) + 1/(γ2 √n2)`.
pub fn binary_objective(gamma1: f64, gamma2: f64, n1: f64, n2: f64) -> f64 {
    1.0 / (gamma1 * n1.sqrt()) + 1.0 / (gamma2 * n2.sqrt())
}

/// Minimizer of [`binary_objective`] subject to `γ1 + γ2 = total`:
/// `γ1* = total · n2^{1/4} / (n1^{1/4} + n2^{1/4})`.
pub fn optimal_binary_margins(n1: usize, n2: usize, total: f64) -> Result<(f64, f64)> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::invalid("counts", "class counts must be >= 1"));
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::invalid("total", "margin sum must be positive"));
    }
    let (r1, r2) = ((n1 as f64).powf(0.25), (n2 as f64).powf(0.25));
    let gamma1 = total * r2 / (r1 + r2);
    Ok((gamma1, total - gamma1))
}

/// `γ_j ∝ n_j^{-1/4}`, scaled so the largest margin equals `normalizer`.
pub fn optimal_margin_profile(counts: &ClassCounts, normalizer: f64) -> Result<MarginProfile> {
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(Error::invalid("normalizer", "must be positive"));
    }
    let n_min = counts.min() as f64;
    MarginProfile::new(
        counts
            .as_slice()
            .iter()
            .map(|&n| normalizer * (n_min / n as f64).powf(0.25))
            .collect(),
    )
}

/// `(1/k) Σ_j [ (1/γ_j) √(complexity / n_j) + log(n)/√n_j ]`, the second term
/// only when `log_n_term` is set (natural log of the total count).
pub fn balanced_bound(
    profile: &MarginProfile,
    counts: &ClassCounts,
    complexity: f64,
    log_n_term: bool,
) -> Result<f64> {
    if profile.0.len() != counts.num_classes() {
        return Err(Error::DimensionMismatch {
            what: "margin profile",
            expected: counts.num_classes(),
            found: profile.0.len(),
        });
    }
    if !(complexity > 0.0 && complexity.is_finite()) {
        return Err(Error::invalid("complexity", "must be positive"));
    }
    let log_n = (counts.total() as f64).ln();
    let sum: f64 = profile
        .0
        .iter()
        .zip(counts.as_slice())
        .map(|(&g, &n)| {
            let n = n as f64;
            let mut term = (complexity / n).sqrt() / g;
            if log_n_term {
                term += log_n / n.sqrt();
            }
            term
        })
        .sum();
    Ok(sum / counts.num_classes() as f64)
}

/// Logit bias `b* = (δ/2, -δ/2)` with `δ = γ1* - γ1'` that moves a binary
/// classifier's class margins `(γ1', γ2')` to the optimal split of the same
/// total. Adding `b*` to the two logits changes the class-1 margin by
/// `b*_1 - b*_2 = δ` and the class-2 margin by `-δ`.
pub fn bias_shift_for_margins(current: (f64, f64), n1: usize, n2: usize) -> Result<(f64, f64)> {
    let (g1, g2) = current;
    if !(g1.is_finite() && g2.is_finite()) {
        return Err(Error::invalid("current", "margins must be finite"));
    }
    let (opt1, _) = optimal_binary_margins(n1, n2, g1 + g2)?;
    let delta = opt1 - g1;
    Ok((delta / 2.0, -delta / 2.0))
}

/// Margins for a known test label distribution: `Δ_j ∝ (n'_j / n_j)^{1/4}`,
/// scaled so the largest equals `max_margin`.
pub fn test_aware_margins(train: &ClassCounts, test: &ClassCounts, max_margin: f64) -> Result<MarginVector> {
    if train.num_classes() != test.num_classes() {
        return Err(Error::DimensionMismatch {
            what: "test counts",
            expected: train.num_classes(),
            found: test.num_classes(),
        });
    }
    if !(max_margin > 0.0 && max_margin.is_finite()) {
        return Err(Error::invalid("max_margin", "must be positive"));
    }
    let raw: Vec<f64> = train
        .as_slice()
        .iter()
        .zip(test.as_slice())
        .map(|(&n, &t)| (t as f64 / n as f64).powf(0.25))
        .collect();
    let top = raw.iter().copied().fold(0.0, f64::max);
    MarginVector::new(raw.into_iter().map(|r| max_margin * (r / top)).collect())
}

/// Per-class minimum of `z_y - max_{j≠y} z_j`. Entries are negative for
/// classes with a misclassified sample.
pub fn class_margins_from_logits(logits: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if logits.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "logit rows",
            expected: labels.len(),
            found: logits.nrows(),
        });
    }
    if logits.ncols() != k {
        return Err(Error::DimensionMismatch {
            what: "logit columns",
            expected: k,
            found: logits.ncols(),
        });
    }
    let mut margins = vec![f64::INFINITY; k];
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let rival = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        margins[y] = margins[y].min(row[y] - rival);
    }
    if let Some(j) = margins.iter().position(|m| m.is_infinite()) {
        return Err(Error::MissingClass(j));
    }
    Ok(margins)
}

pub fn measure_class_margins(model: &NormalizedClassifier, dataset: &Dataset) -> Result<Vec<f64>> {
    let logits = model.logits(dataset.features.view())?;
    class_margins_from_logits(logits.view(), &dataset.labels, dataset.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::compute_ldam_margins;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn counts(v: &[usize]) -> ClassCounts {
        ClassCounts::new(v.to_vec()).unwrap()
    }

    #[test]
    fn binary_margin_examples() {
        assert_eq!(optimal_binary_margins(50, 50, 1.0).unwrap(), (0.5, 0.5));
        let (g1, g2) = optimal_binary_margins(10_000, 100, 1.0).unwrap();
        assert_abs_diff_eq!(g1, 0.240253073352042, epsilon = 1e-12);
        assert_abs_diff_eq!(g2, 0.759746926647958, epsilon = 1e-12);
        assert_abs_diff_eq!(g1 / g2, (100.0f64 / 10_000.0).powf(0.25), epsilon = 1e-12);
        assert!(optimal_binary_margins(0, 1, 1.0).is_err());
        assert!(optimal_binary_margins(1, 1, 0.0).is_err());
    }

    #[test]
    fn profile_examples() {
        let p = optimal_margin_profile(&counts(&[16, 1]), 1.0).unwrap();
        assert_abs_diff_eq!(p.as_slice()[0], 0.5, epsilon = 1e-15);
        assert_eq!(p.as_slice()[1], 1.0);
        let p = optimal_margin_profile(&counts(&[40, 40, 40]), 0.7).unwrap();
        assert_eq!(p.as_slice(), &[0.7; 3]);
        let c = counts(&[5000, 2997, 1796, 50]);
        let p = optimal_margin_profile(&c, 0.5).unwrap();
        let m = compute_ldam_margins(&c, 0.5, 0.25).unwrap();
        for (a, b) in p.as_slice().iter().zip(m.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn bound_examples() {
        let c = counts(&[100, 100]);
        let p = MarginProfile::new(vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(balanced_bound(&p, &c, 1.0, false).unwrap(), 0.2, epsilon = 1e-15);
        let doubled = MarginProfile::new(vec![1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(balanced_bound(&doubled, &c, 1.0, false).unwrap(), 0.1, epsilon = 1e-15);
        // log term adds (1/k) Σ ln(200)/10
        let with_log = balanced_bound(&p, &c, 1.0, true).unwrap();
        assert_abs_diff_eq!(with_log, 0.2 + 200f64.ln() / 10.0, epsilon = 1e-12);
        assert!(balanced_bound(&p, &counts(&[1, 2, 3]), 1.0, false).is_err());
        assert!(balanced_bound(&p, &c, 0.0, false).is_err());
    }

    #[test]
    fn optimal_split_beats_grid() {
        let c = counts(&[10_000, 100]);
        let (g1, g2) = optimal_binary_margins(10_000, 100, 1.0).unwrap();
        let best = balanced_bound(&MarginProfile::new(vec![g1, g2]).unwrap(), &c, 1.0, false).unwrap();
        let steps = 100_000;
        for i in 1..steps {
            let a = i as f64 / steps as f64;
            let p = MarginProfile::new(vec![a, 1.0 - a]).unwrap();
            assert!(balanced_bound(&p, &c, 1.0, false).unwrap() >= best - 1e-15);
        }
    }

    #[test]
    fn bias_shift_examples() {
        let opt = optimal_binary_margins(10_000, 100, 1.0).unwrap();
        let b = bias_shift_for_margins(opt, 10_000, 100).unwrap();
        assert_abs_diff_eq!(b.0, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.1, 0.0, epsilon = 1e-15);

        let b = bias_shift_for_margins((0.5, 0.5), 10_000, 100).unwrap();
        assert_abs_diff_eq!(b.0, -0.129873463323979, epsilon = 1e-12);
        assert_abs_diff_eq!(b.1, 0.129873463323979, epsilon = 1e-12);
        assert!(bias_shift_for_margins((0.5, -0.5), 1, 1).is_err());
    }

    #[test]
    fn test_aware_examples() {
        let c = counts(&[300, 20, 7]);
        let m = test_aware_margins(&c, &c, 0.5).unwrap();
        assert_eq!(m.as_slice(), &[0.5; 3]);

        let m = test_aware_margins(&counts(&[1000, 10]), &counts(&[10, 1000]), 0.5).unwrap();
        assert_abs_diff_eq!(m.as_slice()[0], 0.05, epsilon = 1e-12);
        assert_eq!(m.as_slice()[1], 0.5);

        let m = test_aware_margins(&c, &counts(&[9, 9, 9]), 0.5).unwrap();
        let l = compute_ldam_margins(&c, 0.5, 0.25).unwrap();
        for (a, b) in m.as_slice().iter().zip(l.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn class_margins_from_logits_cases() {
        let s = 7.0;
        let z = array![[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]];
        assert_eq!(class_margins_from_logits(z.view(), &[0, 1, 2], 3).unwrap(), vec![s; 3]);

        let z = array![[2.0, 1.0], [0.5, 1.5], [3.0, 0.0]];
        let m = class_margins_from_logits(z.view(), &[0, 0, 1], 2).unwrap();
        assert_eq!(m, vec![-1.0, -3.0]);

        let z = array![[2.0, 1.0]];
        assert!(matches!(
            class_margins_from_logits(z.view(), &[0], 2),
            Err(Error::MissingClass(1))
        ));
    }
}
