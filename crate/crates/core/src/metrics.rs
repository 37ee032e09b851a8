//! Confusion matrices, per-class error and balanced error.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::NormalizedClassifier;
use crate::schedule::TrainingLog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `confusion[t][p]` counts samples of true class `t` predicted as `p`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_error: Vec<f64>,
    /// Unweighted mean of `per_class_error`.
    pub balanced_error: f64,
    pub overall_error: f64,
    pub n_eval: usize,
}

impl EvalReport {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], k: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::DimensionMismatch {
                what: "predictions",
                expected: labels.len(),
                found: predictions.len(),
            });
        }
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in labels.iter().zip(predictions) {
            if t >= k || p >= k {
                return Err(Error::invalid("labels", format!("class index out of range for k = {k}")));
            }
            confusion[t][p] += 1;
        }
        let mut per_class_error = Vec::with_capacity(k);
        let mut wrong = 0;
        for (j, row) in confusion.iter().enumerate() {
            let total: usize = row.iter().sum();
            if total == 0 {
                return Err(Error::MissingClass(j));
            }
            wrong += total - row[j];
            per_class_error.push(1.0 - row[j] as f64 / total as f64);
        }
        let n_eval = labels.len();
        Ok(Self {
            balanced_error: per_class_error.iter().sum::<f64>() / k as f64,
            overall_error: wrong as f64 / n_eval as f64,
            per_class_error,
            confusion,
            n_eval,
        })
    }

    /// Error under an arbitrary class prior, e.g. a known imbalanced test
    /// label distribution given as counts.
    pub fn error_under_prior(&self, prior_counts: &[usize]) -> Result<f64> {
        if prior_counts.len() != self.per_class_error.len() {
            return Err(Error::DimensionMismatch {
                what: "prior counts",
                expected: self.per_class_error.len(),
                found: prior_counts.len(),
            });
        }
        let total: usize = prior_counts.iter().sum();
        if total == 0 {
            return Err(Error::ZeroWeightSum);
        }
        Ok(prior_counts
            .iter()
            .zip(&self.per_class_error)
            .map(|(&n, e)| n as f64 * e)
            .sum::<f64>()
            / total as f64)
    }

    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,count,error\n");
        for (j, (row, e)) in self.confusion.iter().zip(&self.per_class_error).enumerate() {
            out.push_str(&format!("{j},{},{e}\n", row.iter().sum::<usize>()));
        }
        out
    }
}

pub fn evaluate(model: &NormalizedClassifier, dataset: &Dataset) -> Result<EvalReport> {
    if dataset.k != model.num_classes() {
        return Err(Error::DimensionMismatch {
            what: "class count",
            expected: model.num_classes(),
            found: dataset.k,
        });
    }
    let predictions = model.predict(dataset.features.view())?;
    EvalReport::from_predictions(&dataset.labels, &predictions, dataset.k)
}

/// Flat record of one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub epochs: usize,
    pub final_balanced_error: f64,
    pub final_overall_error: f64,
    pub final_per_class_error: Vec<f64>,
    pub best_epoch: usize,
    pub best_balanced_error: f64,
    /// Per-class minimum training margins of the final model, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_class_margins: Option<Vec<f64>>,
    pub config: serde_json::Value,
}

pub fn summarize(log: &TrainingLog, report: &EvalReport, config: serde_json::Value) -> Result<Summary> {
    let last = log.records.last().ok_or(Error::Empty("no epochs"))?;
    // earliest epoch wins ties
    let best = log
        .records
        .iter()
        .fold(last, |best, r| {
            if r.balanced_val_error < best.balanced_val_error
                || (r.balanced_val_error == best.balanced_val_error && r.epoch < best.epoch)
            {
                r
            } else {
                best
            }
        });
    Ok(Summary {
        epochs: log.records.len(),
        final_balanced_error: report.balanced_error,
        final_overall_error: report.overall_error,
        final_per_class_error: report.per_class_error.clone(),
        best_epoch: best.epoch,
        best_balanced_error: best.balanced_val_error,
        train_class_margins: None,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::EpochRecord;
    use approx::assert_abs_diff_eq;

    fn record(epoch: usize, bal: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            lr: 0.1,
            train_loss: 1.0,
            train_error: 0.5,
            balanced_val_error: bal,
            per_class_val_error: vec![bal, bal],
        }
    }

    #[test]
    fn perfect_predictor() {
        let r = EvalReport::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(r.per_class_error, vec![0.0; 3]);
        assert_eq!(r.balanced_error, 0.0);
        assert_eq!(r.overall_error, 0.0);
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let r = EvalReport::from_predictions(&[0, 0, 1, 1], &[0; 4], 2).unwrap();
        assert_eq!(r.per_class_error, vec![0.0, 1.0]);
        assert_eq!(r.balanced_error, 0.5);
    }

    #[test]
    fn hand_enumerated_example() {
        let r = EvalReport::from_predictions(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(r.per_class_error, vec![0.5, 0.0]);
        assert_eq!(r.balanced_error, 0.25);
        assert_abs_diff_eq!(r.overall_error, 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(r.n_eval, 3);
        assert_abs_diff_eq!(r.error_under_prior(&[1, 3]).unwrap(), 0.125, epsilon = 1e-15);
    }

    #[test]
    fn missing_class_is_an_error() {
        assert!(matches!(
            EvalReport::from_predictions(&[0, 0], &[0, 1], 2),
            Err(Error::MissingClass(1))
        ));
    }

    #[test]
    fn summary_cases() {
        let report = EvalReport::from_predictions(&[0, 1], &[0, 1], 2).unwrap();
        let empty = TrainingLog::default();
        let err = summarize(&empty, &report, serde_json::Value::Null).unwrap_err();
        assert_eq!(err.to_string(), "no epochs");

        let single = TrainingLog {
            records: vec![record(0, 0.3)],
        };
        let s = summarize(&single, &report, serde_json::Value::Null).unwrap();
        assert_eq!((s.best_epoch, s.best_balanced_error), (0, 0.3));

        let improving = TrainingLog {
            records: vec![record(0, 0.4), record(1, 0.3), record(2, 0.2)],
        };
        let s = summarize(&improving, &report, serde_json::json!({"seed": 1})).unwrap();
        assert_eq!((s.best_epoch, s.best_balanced_error), (2, 0.2));
        assert_eq!(s.epochs, 3);
        assert_eq!(s.config["seed"], 1);
    }

    #[test]
    fn per_class_csv_layout() {
        let r = EvalReport::from_predictions(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(r.per_class_csv(), "class,count,error\n0,2,0.5\n1,1,0\n");
    }
}
