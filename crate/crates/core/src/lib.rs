//! Label-distribution-aware margin (LDAM) training for class-imbalanced
//! classification.
//!
//! The crate is organized bottom-up:
//!
//! - [`data`]: class-count profiles, synthetic Gaussian mixtures, CSV I/O and
//!   class-balanced resampling.
//! - [`losses`]: LDAM softmax/hinge, cross-entropy, focal loss, all with
//!   analytic gradients with respect to logits.
//! - [`weighting`]: per-class re-weighting schemes and per-batch
//!   renormalization.
//! - [`model`]: a small classifier with a cosine (normalized) output layer,
//!   manual backpropagation and momentum SGD.
//! - [`schedule`]: learning-rate schedules and the two-stage deferred
//!   re-balancing driver.
//! - [`theory`]: closed-form margin trade-off calculators.
//! - [`metrics`]: confusion matrices, per-class and balanced error.
//! - [`experiment`]: config-driven end-to-end runs used by the CLI.

pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod theory;
pub mod weighting;

pub use data::{ClassCounts, Dataset, ImbalanceKind, ImbalanceSpec};
pub use error::{Error, Result};
pub use losses::{LossFn, LossValueGrad, MarginVector};
pub use metrics::EvalReport;
pub use model::{ModelConfig, NormalizedClassifier, OptimizerState};
pub use schedule::{LrSchedule, TrainingLog, TrainingPlan};
pub use theory::MarginProfile;
pub use weighting::ClassWeights;
