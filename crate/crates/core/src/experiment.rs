//! Config-driven experiments.
//!
//! An [`ExperimentConfig`] is a single JSON document describing the data, the
//! model, the loss, the re-balancing policy and the schedule. Every source of
//! randomness is derived from the top-level `seed` with a purpose tag
//! (`train-data`, `val-data`, `model`, and per-epoch `shuffle` / `resample`
//! streams inside the driver).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{self, ClassCounts, Dataset, ImbalanceSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, Summary};
use crate::model::{ModelConfig, NormalizedClassifier};
use crate::rng::derive_seed;
use crate::schedule::{
    self, LossKind, LrSchedule, RebalanceKind, RebalanceMode, TrainingLog, TrainingPlan, WeightingScheme,
};
use crate::theory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub loss: LossBlock,
    #[serde(default)]
    pub rebalance: RebalanceBlock,
    #[serde(default)]
    pub schedule: ScheduleBlock,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        /// Count profile; ignored when `counts` is given.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        imbalance: Option<ImbalanceSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        counts: Option<Vec<usize>>,
        dim: usize,
        separation: f64,
        /// Per-class size of the balanced validation set.
        #[serde(default = "default_val_per_class")]
        val_per_class: usize,
        /// Explicit validation counts, overriding `val_per_class`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val_counts: Option<Vec<usize>>,
    },
    Csv {
        train: PathBuf,
        val: PathBuf,
        #[serde(default)]
        has_header: bool,
    },
}

fn default_val_per_class() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default)]
    pub hidden: usize,
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn yes() -> bool {
    true
}

fn default_scale() -> f64 {
    30.0
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            hidden: 0,
            normalize: true,
            scale: default_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBlock {
    #[serde(default = "default_loss_kind")]
    pub kind: LossKind,
    #[serde(default = "default_max_margin")]
    pub max_margin: f64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
    #[serde(default = "default_focal_gamma")]
    pub focal_gamma: f64,
    /// Known test label counts for test-aware LDAM margins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_counts: Option<Vec<usize>>,
}

fn default_loss_kind() -> LossKind {
    LossKind::LdamCe
}

fn default_max_margin() -> f64 {
    0.5
}

fn default_exponent() -> f64 {
    0.25
}

fn default_focal_gamma() -> f64 {
    1.0
}

impl Default for LossBlock {
    fn default() -> Self {
        Self {
            kind: default_loss_kind(),
            max_margin: default_max_margin(),
            exponent: default_exponent(),
            focal_gamma: default_focal_gamma(),
            test_counts: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    InverseFreq,
    EffectiveNumber,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RebalanceBlock {
    #[serde(default = "default_rebalance_kind")]
    pub kind: RebalanceKind,
    #[serde(default = "default_mode")]
    pub mode: RebalanceMode,
    #[serde(default = "default_scheme")]
    pub scheme: SchemeName,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_rebalance_kind() -> RebalanceKind {
    RebalanceKind::Reweight
}

fn default_mode() -> RebalanceMode {
    RebalanceMode::Deferred
}

fn default_scheme() -> SchemeName {
    SchemeName::InverseFreq
}

fn default_beta() -> f64 {
    0.9999
}

impl Default for RebalanceBlock {
    fn default() -> Self {
        Self {
            kind: default_rebalance_kind(),
            mode: default_mode(),
            scheme: default_scheme(),
            beta: default_beta(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epoch at which deferred re-balancing starts; defaults to the first
    /// learning-rate decay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_boundary: Option<usize>,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_decay_epochs")]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_epochs() -> usize {
    200
}

fn default_base_lr() -> f64 {
    0.1
}

fn default_warmup() -> usize {
    5
}

fn default_decay_epochs() -> Vec<usize> {
    vec![160, 180]
}

fn default_decay_factor() -> f64 {
    0.01
}

fn default_batch_size() -> usize {
    128
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    2e-4
}

impl Default for ScheduleBlock {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            stage_boundary: None,
            base_lr: default_base_lr(),
            warmup_epochs: default_warmup(),
            decay_epochs: default_decay_epochs(),
            decay_factor: default_decay_factor(),
            batch_size: default_batch_size(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    /// The standard synthetic benchmark: two 10-dim Gaussian classes with
    /// counts [5000, 50], a balanced validation set of 2000 per class, a
    /// cosine classifier at scale 10, and a 60-epoch schedule deferring
    /// re-weighting to epoch 40.
    pub fn benchmark() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/benchmark"),
            dataset: DatasetConfig::Synthetic {
                imbalance: None,
                counts: Some(vec![5000, 50]),
                dim: 10,
                separation: 2.0,
                val_per_class: 2000,
                val_counts: None,
            },
            model: ModelBlock {
                scale: 10.0,
                ..ModelBlock::default()
            },
            loss: LossBlock::default(),
            rebalance: RebalanceBlock::default(),
            schedule: ScheduleBlock {
                epochs: 60,
                stage_boundary: Some(40),
                base_lr: 0.1,
                warmup_epochs: 5,
                decay_epochs: vec![40, 50],
                decay_factor: 0.1,
                ..ScheduleBlock::default()
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Fill defaults that depend on other fields.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        if out.schedule.stage_boundary.is_none() {
            out.schedule.stage_boundary = Some(
                out.schedule
                    .decay_epochs
                    .first()
                    .copied()
                    .unwrap_or(out.schedule.epochs),
            );
        }
        out
    }

    /// Training counts implied by a synthetic dataset block.
    pub fn synthetic_counts(&self) -> Result<Option<ClassCounts>> {
        match &self.dataset {
            DatasetConfig::Synthetic { imbalance, counts, .. } => match (counts, imbalance) {
                (Some(c), _) => ClassCounts::new(c.clone()).map(Some),
                (None, Some(spec)) => spec.counts().map(Some),
                (None, None) => Err(Error::Config(
                    "synthetic dataset needs `counts` or `imbalance`".into(),
                )),
            },
            DatasetConfig::Csv { .. } => Ok(None),
        }
    }

    /// Reject every cross-field violation before any compute is spent.
    pub fn validate(&self) -> Result<()> {
        let cfg = self.resolved();
        let counts = cfg.synthetic_counts().map_err(config_err)?;
        if let DatasetConfig::Synthetic {
            dim,
            separation,
            val_per_class,
            val_counts,
            ..
        } = &cfg.dataset
        {
            let k = counts.as_ref().map_or(0, ClassCounts::num_classes);
            if *dim == 0 {
                return Err(Error::Config("dataset.dim must be >= 1".into()));
            }
            if !(*separation > 0.0 && separation.is_finite()) {
                return Err(Error::Config("dataset.separation must be positive".into()));
            }
            match val_counts {
                Some(v) => {
                    ClassCounts::new(v.clone()).map_err(config_err)?;
                    if v.len() != k {
                        return Err(Error::Config(format!(
                            "dataset.val_counts has {} classes, training counts have {k}",
                            v.len()
                        )));
                    }
                }
                None if *val_per_class == 0 => {
                    return Err(Error::Config("dataset.val_per_class must be >= 1".into()));
                }
                None => {}
            }
            if let Some(t) = &cfg.loss.test_counts {
                ClassCounts::new(t.clone()).map_err(config_err)?;
                if t.len() != k {
                    return Err(Error::Config(format!(
                        "loss.test_counts has {} classes, training counts have {k}",
                        t.len()
                    )));
                }
            }
        }
        let s = &cfg.schedule;
        cfg.lr_schedule().validate().map_err(config_err)?;
        cfg.plan().validate().map_err(config_err)?;
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(Error::Config("schedule.momentum must lie in [0, 1)".into()));
        }
        if s.weight_decay.is_nan() || s.weight_decay < 0.0 {
            return Err(Error::Config("schedule.weight_decay must be >= 0".into()));
        }
        if cfg.loss.kind != LossKind::ErmCe && cfg.loss.kind != LossKind::Focal {
            if !(cfg.loss.max_margin >= 0.0 && cfg.loss.max_margin.is_finite()) {
                return Err(Error::Config("loss.max_margin must be >= 0".into()));
            }
            let ldam = matches!(cfg.loss.kind, LossKind::LdamCe | LossKind::LdamHinge);
            if ldam && cfg.loss.max_margin == 0.0 {
                return Err(Error::Config("loss.max_margin must be positive for LDAM losses".into()));
            }
            if cfg.loss.exponent.is_nan() || cfg.loss.exponent <= 0.0 {
                return Err(Error::Config("loss.exponent must be positive".into()));
            }
        }
        if !(cfg.model.scale > 0.0 && cfg.model.scale.is_finite()) {
            return Err(Error::Config("model.scale must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.schedule.base_lr,
            warmup_epochs: self.schedule.warmup_epochs,
            decay_epochs: self.schedule.decay_epochs.clone(),
            decay_factor: self.schedule.decay_factor,
        }
    }

    pub fn plan(&self) -> TrainingPlan {
        let s = &self.schedule;
        TrainingPlan {
            total_epochs: s.epochs,
            stage_boundary: s
                .stage_boundary
                .unwrap_or_else(|| s.decay_epochs.first().copied().unwrap_or(s.epochs)),
            loss: self.loss.kind,
            rebalance: self.rebalance.kind,
            mode: self.rebalance.mode,
            scheme: match self.rebalance.scheme {
                SchemeName::InverseFreq => WeightingScheme::InverseFreq,
                SchemeName::EffectiveNumber => WeightingScheme::EffectiveNumber {
                    beta: self.rebalance.beta,
                },
            },
            batch_size: s.batch_size,
            seed: self.seed,
            max_margin: self.loss.max_margin,
            margin_exponent: self.loss.exponent,
            focal_gamma: self.loss.focal_gamma,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            test_counts: self.loss.test_counts.clone(),
        }
    }

    pub fn model_config(&self, input_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            classes,
            hidden: self.model.hidden,
            normalize: self.model.normalize,
            scale: self.model.scale,
        }
    }

    /// Build (train, validation) datasets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                dim,
                separation,
                val_per_class,
                val_counts,
                ..
            } => {
                let counts = self.synthetic_counts()?.expect("synthetic block");
                let val_counts = match val_counts {
                    Some(v) => ClassCounts::new(v.clone())?,
                    None => ClassCounts::new(vec![*val_per_class; counts.num_classes()])?,
                };
                let train = data::sample_gaussian_mixture(
                    &counts,
                    *dim,
                    *separation,
                    derive_seed(self.seed, "train-data", 0),
                )?;
                let val = data::sample_gaussian_mixture(
                    &val_counts,
                    *dim,
                    *separation,
                    derive_seed(self.seed, "val-data", 0),
                )?;
                Ok((train, val))
            }
            DatasetConfig::Csv { train, val, has_header } => {
                let train = data::load_csv(train, *has_header)?;
                let val = data::load_csv(val, *has_header)?;
                if train.original_labels != val.original_labels {
                    return Err(Error::Config(format!(
                        "train labels {:?} and validation labels {:?} differ",
                        train.original_labels, val.original_labels
                    )));
                }
                Ok((train.dataset, val.dataset))
            }
        }
    }
}

/// Everything produced by one training run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub model: NormalizedClassifier,
    pub log: TrainingLog,
    pub report: EvalReport,
    pub summary: Summary,
}

pub fn run_with_data(config: &ExperimentConfig, train: &Dataset, val: &Dataset) -> Result<ExperimentOutcome> {
    config.validate()?;
    let config = config.resolved();
    let model = NormalizedClassifier::new(
        config.model_config(train.dim(), train.k),
        derive_seed(config.seed, "model", 0),
    )?;
    let (model, log) =
        schedule::run_deferred_training(&config.plan(), train, val, model, &config.lr_schedule())?;
    let report = metrics::evaluate(&model, val)?;
    let mut summary = metrics::summarize(&log, &report, config.to_value())?;
    summary.train_class_margins = Some(theory::measure_class_margins(&model, train)?);
    Ok(ExperimentOutcome {
        model,
        log,
        report,
        summary,
    })
}

pub fn run(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let (train, val) = config.datasets()?;
    run_with_data(config, &train, &val)
}

/// Set the dotted `path` (e.g. `schedule.epochs`) in a JSON config to `value`,
/// creating intermediate objects as needed.
pub fn set_path(doc: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad config path `{path}`")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Parse a `key=value` override; the value is read as JSON when it parses,
/// otherwise as a bare string.
pub fn parse_override(spec: &str) -> Result<(String, serde_json::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}
