//! Classification losses with analytic gradients with respect to the logits.
//!
//! Every per-sample loss returns a [`LossValueGrad`]; [`batch_loss`] reduces a
//! batch with per-sample weights into a weighted mean and the matching logit
//! gradient matrix.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::ClassCounts;
use crate::error::{Error, Result};

/// Per-class margins `Δ_j` subtracted from the true-class logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MarginVector(Vec<f64>);

impl MarginVector {
    pub fn new(deltas: Vec<f64>) -> Result<Self> {
        if let Some(bad) = deltas.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::invalid("deltas", format!("margins must be finite and >= 0, got {bad}")));
        }
        Ok(Self(deltas))
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    /// Multiply every margin by `factor` (e.g. the logit scale of a cosine
    /// classifier, so margins stay expressed in cosine units).
    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|d| d * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for MarginVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MarginVector> for Vec<f64> {
    fn from(m: MarginVector) -> Self {
        m.0
    }
}

/// Loss value with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValueGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `Δ_j = C / n_j^exponent` with `C` chosen so the largest margin (at the
/// smallest class) equals `max_margin`.
pub fn compute_ldam_margins(counts: &ClassCounts, max_margin: f64, exponent: f64) -> Result<MarginVector> {
    if !(max_margin > 0.0 && max_margin.is_finite()) {
        return Err(Error::invalid("max_margin", "must be positive"));
    }
    if !(exponent > 0.0 && exponent.is_finite()) {
        return Err(Error::invalid("exponent", "must be positive"));
    }
    let n_min = counts.min() as f64;
    // C / n_j^e normalized by C / n_min^e; the ratio form makes the max exact
    let deltas = counts
        .as_slice()
        .iter()
        .map(|&n| max_margin * (n_min / n as f64).powf(exponent))
        .collect();
    MarginVector::new(deltas)
}

pub fn uniform_margin_vector(k: usize, margin: f64) -> Result<MarginVector> {
    MarginVector::new(vec![margin; k])
}

fn check_inputs(z: &[f64], y: usize) {
    assert!(y < z.len(), "label {y} out of range for {} logits", z.len());
}

/// Numerically stable softmax and `log p_y`.
fn softmax_with_log(z: &[f64], y: usize) -> (Vec<f64>, f64) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    let log_sum = sum.ln();
    for v in &mut p {
        *v /= sum;
    }
    (p, z[y] - max - log_sum)
}

/// Standard softmax cross-entropy.
pub fn cross_entropy(z: &[f64], y: usize) -> LossValueGrad {
    check_inputs(z, y);
    let (mut p, log_py) = softmax_with_log(z, y);
    p[y] -= 1.0;
    LossValueGrad {
        value: -log_py,
        grad: p,
    }
}

/// Cross-entropy on logits whose true-class entry is lowered by `Δ_y`.
pub fn ldam_softmax(z: &[f64], y: usize, deltas: &MarginVector) -> LossValueGrad {
    check_inputs(z, y);
    assert_eq!(z.len(), deltas.len(), "logit and margin lengths differ");
    let mut shifted = z.to_vec();
    shifted[y] -= deltas.0[y];
    cross_entropy(&shifted, y)
}

/// Multi-class hinge `max(max_{j≠y} z_j - z_y + Δ_y, 0)`.
///
/// Subgradient: zero when the loss is zero (including the kink), otherwise
/// `+1` at the lowest-index maximizing rival and `-1` at `y`.
pub fn ldam_hinge(z: &[f64], y: usize, deltas: &MarginVector) -> LossValueGrad {
    check_inputs(z, y);
    assert_eq!(z.len(), deltas.len(), "logit and margin lengths differ");
    let mut rival = usize::MAX;
    let mut rival_z = f64::NEG_INFINITY;
    for (j, &v) in z.iter().enumerate() {
        if j != y && v > rival_z {
            rival = j;
            rival_z = v;
        }
    }
    let slack = rival_z - z[y] + deltas.0[y];
    let mut grad = vec![0.0; z.len()];
    if slack > 0.0 {
        grad[rival] = 1.0;
        grad[y] = -1.0;
        LossValueGrad { value: slack, grad }
    } else {
        LossValueGrad { value: 0.0, grad }
    }
}

/// Focal loss `-(1 - p_y)^gamma * log p_y`.
pub fn focal(z: &[f64], y: usize, gamma: f64) -> LossValueGrad {
    check_inputs(z, y);
    assert!(gamma >= 0.0, "focusing parameter must be >= 0");
    if gamma == 0.0 {
        return cross_entropy(z, y);
    }
    let (p, log_py) = softmax_with_log(z, y);
    // 1 - p_y summed from the rivals keeps precision when p_y ~ 1
    let q: f64 = p.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, v)| v).sum();
    let py = p[y];
    let value = -q.powf(gamma) * log_py;
    // dL/dz_j = [gamma * q^(gamma-1) * p_y * log p_y - q^gamma] * (1[j=y] - p_j)
    let coef = if q > 0.0 {
        gamma * q.powf(gamma - 1.0) * py * log_py - q.powf(gamma)
    } else {
        0.0
    };
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| coef * (if j == y { 1.0 } else { 0.0 } - pj))
        .collect();
    LossValueGrad { value, grad }
}

/// A per-sample loss together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LossFn {
    CrossEntropy,
    /// LDAM softmax; with a uniform vector this is the uniform-margin baseline.
    MarginSoftmax(MarginVector),
    MarginHinge(MarginVector),
    Focal { gamma: f64 },
}

impl LossFn {
    pub fn eval(&self, z: &[f64], y: usize) -> LossValueGrad {
        match self {
            LossFn::CrossEntropy => cross_entropy(z, y),
            LossFn::MarginSoftmax(d) => ldam_softmax(z, y, d),
            LossFn::MarginHinge(d) => ldam_hinge(z, y, d),
            LossFn::Focal { gamma } => focal(z, y, *gamma),
        }
    }
}

/// Weighted mean `Σ w_i L_i / Σ w_i` over a batch of logit rows, with the
/// gradient of that scalar with respect to every logit.
///
/// Rows are reduced sequentially in index order.
pub fn batch_loss(
    loss: &LossFn,
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
    sample_weights: &[f64],
) -> Result<(f64, Array2<f64>)> {
    let (m, k) = logits.dim();
    if labels.len() != m {
        return Err(Error::DimensionMismatch {
            what: "batch labels",
            expected: m,
            found: labels.len(),
        });
    }
    if sample_weights.len() != m {
        return Err(Error::DimensionMismatch {
            what: "sample weights",
            expected: m,
            found: sample_weights.len(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid("labels", format!("label {y} out of range for k = {k}")));
    }
    if sample_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("sample_weights", "weights must be finite and >= 0"));
    }
    let total: f64 = sample_weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeightSum);
    }

    let mut grad = Array2::zeros((m, k));
    let mut value = 0.0;
    let mut row_buf = vec![0.0; k];
    for (i, row) in logits.rows().into_iter().enumerate() {
        let z = match row.as_slice() {
            Some(s) => s,
            None => {
                row_buf.iter_mut().zip(row.iter()).for_each(|(d, s)| *d = *s);
                &row_buf[..]
            }
        };
        let out = loss.eval(z, labels[i]);
        let scale = sample_weights[i] / total;
        value += scale * out.value;
        for (g, d) in grad.row_mut(i).iter_mut().zip(&out.grad) {
            *g = scale * d;
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn mv(v: &[f64]) -> MarginVector {
        MarginVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ldam_margin_examples() {
        let c = ClassCounts::new(vec![1000, 10]).unwrap();
        let d = compute_ldam_margins(&c, 0.5, 0.25).unwrap();
        assert_abs_diff_eq!(d.as_slice()[0], 0.158113883008419, epsilon = 1e-12);
        assert_eq!(d.as_slice()[1], 0.5);

        let c = ClassCounts::new(vec![100, 100]).unwrap();
        assert_eq!(compute_ldam_margins(&c, 0.5, 0.25).unwrap().as_slice(), &[0.5, 0.5]);

        let c = ClassCounts::new(vec![16, 1]).unwrap();
        let d = compute_ldam_margins(&c, 0.5, 0.25).unwrap();
        assert_abs_diff_eq!(d.as_slice()[0], 0.25, epsilon = 1e-15);
        assert_eq!(d.as_slice()[1], 0.5);
    }

    #[test]
    fn ldam_margin_cube_root_exponent() {
        let c = ClassCounts::new(vec![8000, 1]).unwrap();
        let d = compute_ldam_margins(&c, 1.0, 1.0 / 3.0).unwrap();
        assert_abs_diff_eq!(d.as_slice()[0], 0.05, epsilon = 1e-12);
    }

    #[test]
    fn ldam_margin_preconditions() {
        let c = ClassCounts::new(vec![10, 1]).unwrap();
        assert!(compute_ldam_margins(&c, 0.0, 0.25).is_err());
        assert!(compute_ldam_margins(&c, 0.5, 0.0).is_err());
        assert!(MarginVector::new(vec![0.1, -0.1]).is_err());
    }

    #[test]
    fn uniform_margins() {
        assert_eq!(uniform_margin_vector(3, 0.5).unwrap().as_slice(), &[0.5; 3]);
        assert_eq!(uniform_margin_vector(2, 0.0).unwrap().as_slice(), &[0.0; 2]);
        assert_eq!(uniform_margin_vector(10, 0.3).unwrap().as_slice(), &[0.3; 10]);
    }

    #[test]
    fn ldam_softmax_examples() {
        let out = ldam_softmax(&[0.0, 0.0], 0, &mv(&[0.0, 0.0]));
        assert_abs_diff_eq!(out.value, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(out.grad[0], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out.grad[1], 0.5, epsilon = 1e-15);

        let out = ldam_softmax(&[2.0, 1.0], 0, &mv(&[0.5, 0.5]));
        assert_abs_diff_eq!(out.value, 0.474076984180107, epsilon = 1e-12);
    }

    #[test]
    fn ldam_softmax_large_logits_stay_finite() {
        let out = ldam_softmax(&[1e4, -1e4, 0.0], 1, &mv(&[0.5, 0.5, 0.5]));
        assert!(out.value.is_finite());
        assert_abs_diff_eq!(out.value, 2e4 + 0.5, epsilon = 1e-9);
        assert!(out.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn hinge_examples() {
        let out = ldam_hinge(&[2.0, 1.0], 0, &mv(&[0.5, 0.0]));
        assert_eq!(out.value, 0.0);
        assert_eq!(out.grad, vec![0.0, 0.0]);

        let out = ldam_hinge(&[1.0, 2.0], 0, &mv(&[0.5, 0.0]));
        assert_eq!(out.value, 1.5);
        assert_eq!(out.grad, vec![-1.0, 1.0]);

        // exactly at the kink: zero branch
        let out = ldam_hinge(&[0.0, 0.0, 0.0], 1, &mv(&[0.3, 0.0, 0.3]));
        assert_eq!(out.value, 0.0);
        assert_eq!(out.grad, vec![0.0; 3]);
    }

    #[test]
    fn hinge_tie_break_lowest_index() {
        let out = ldam_hinge(&[3.0, 1.0, 3.0], 1, &mv(&[0.0, 0.1, 0.0]));
        assert_eq!(out.grad, vec![1.0, -1.0, 0.0]);
    }

    #[test]
    fn focal_examples() {
        let out = focal(&[0.0, 0.0], 0, 0.0);
        assert_abs_diff_eq!(out.value, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(out.grad[0], -0.5, epsilon = 1e-15);

        let out = focal(&[0.0, 0.0], 0, 2.0);
        assert_abs_diff_eq!(out.value, 0.173286795139986, epsilon = 1e-12);
    }

    #[test]
    fn focal_saturated_prediction() {
        let out = focal(&[800.0, 0.0], 0, 2.0);
        assert_eq!(out.value, 0.0);
        assert!(out.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn batch_single_sample_matches_loss() {
        let loss = LossFn::MarginSoftmax(mv(&[0.2, 0.4, 0.1]));
        let z = array![[0.3, -1.0, 2.0]];
        let (v, g) = batch_loss(&loss, z.view(), &[1], &[1.0]).unwrap();
        let single = loss.eval(&[0.3, -1.0, 2.0], 1);
        assert_eq!(v, single.value);
        assert_eq!(g.row(0).to_vec(), single.grad);
    }

    #[test]
    fn batch_weighted_mean_contract() {
        let loss = LossFn::Focal { gamma: 1.5 };
        let two = array![[0.3, -1.0], [0.3, -1.0]];
        let one = array![[0.3, -1.0]];
        let (a, _) = batch_loss(&loss, two.view(), &[1, 1], &[1.0, 1.0]).unwrap();
        let (b, _) = batch_loss(&loss, one.view(), &[1], &[2.0]).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
    }

    #[test]
    fn batch_rejects_bad_weights() {
        let z = array![[0.0, 1.0]];
        assert!(matches!(
            batch_loss(&LossFn::CrossEntropy, z.view(), &[0], &[0.0]),
            Err(Error::ZeroWeightSum)
        ));
        assert!(batch_loss(&LossFn::CrossEntropy, z.view(), &[0], &[-1.0]).is_err());
        assert!(batch_loss(&LossFn::CrossEntropy, z.view(), &[0, 1], &[1.0]).is_err());
        assert!(batch_loss(&LossFn::CrossEntropy, z.view(), &[2], &[1.0]).is_err());
    }
}
