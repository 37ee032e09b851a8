//! Shared fixtures for the criterion benches.

use ldam_core::data::{sample_gaussian_mixture, ClassCounts, Dataset};
use ldam_core::experiment::ExperimentConfig;
use ldam_core::model::{ModelConfig, NormalizedClassifier};
use ndarray::{s, Array2};

/// Train and validation sets of the standard synthetic benchmark.
pub fn benchmark_data() -> (Dataset, Dataset) {
    ExperimentConfig::benchmark().datasets().expect("benchmark config is valid")
}

/// A single minibatch of `rows` samples drawn from a `k`-class mixture in `dim` dimensions.
pub fn batch(rows: usize, dim: usize, k: usize) -> (Array2<f64>, Vec<usize>) {
    let per_class = rows.div_ceil(k);
    let counts = ClassCounts::new(vec![per_class; k]).expect("k >= 2");
    let ds = sample_gaussian_mixture(&counts, dim, 2.0, 17).expect("valid mixture");
    (ds.features.slice(s![..rows, ..]).to_owned(), ds.labels[..rows].to_vec())
}

pub fn model(input_dim: usize, classes: usize, hidden: usize) -> NormalizedClassifier {
    let config = ModelConfig {
        input_dim,
        classes,
        hidden,
        normalize: true,
        scale: 10.0,
    };
    NormalizedClassifier::new(config, 3).expect("valid model config")
}

/// Logits of a freshly initialised model on [`batch`].
pub fn logits(rows: usize, k: usize) -> (Array2<f64>, Vec<usize>) {
    let (x, y) = batch(rows, 16, k);
    (model(16, k, 0).logits(x.view()).expect("shapes agree"), y)
}
