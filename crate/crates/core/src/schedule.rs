//! Learning-rate schedules and the two-stage deferred re-balancing driver.
//!
//! Stage one (`epoch < stage_boundary`) trains with uniform sample weights and
//! uniformly shuffled minibatches. Stage two switches on re-weighting (weights
//! renormalized to mean one per batch) or class-balanced re-sampling. Margin
//! losses keep their label-dependent margins in both stages.

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{BalancedResampler, ClassCounts, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, LossFn, MarginVector};
use crate::metrics;
use crate::model::{sgd_step, NormalizedClassifier, OptimizerState};
use crate::rng;
use crate::theory;
use crate::weighting::{self, ClassWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
}

fn default_decay_factor() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            warmup_epochs: 0,
            decay_epochs: Vec::new(),
            decay_factor: default_decay_factor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr", "must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::invalid("decay_factor", "must lie in (0, 1)"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("decay_epochs", "must be strictly increasing"));
        }
        if let Some(&first) = self.decay_epochs.first() {
            if self.warmup_epochs >= first {
                return Err(Error::invalid("warmup_epochs", "warm-up must end before the first decay"));
            }
        }
        Ok(())
    }

    /// Linear warm-up `base * (epoch + 1) / warmup`, then `base * factor^d`
    /// where `d` counts decay epochs `<= epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let decays = self.decay_epochs.iter().take_while(|&&d| d <= epoch).count();
        self.base_lr * self.decay_factor.powi(decays as i32)
    }

    pub fn first_decay(&self) -> Option<usize> {
        self.decay_epochs.first().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    ErmCe,
    LdamCe,
    LdamHinge,
    Focal,
    UniformMarginCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RebalanceKind {
    None,
    Reweight,
    Resample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RebalanceMode {
    Deferred,
    Always,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightingScheme {
    InverseFreq,
    EffectiveNumber { beta: f64 },
}

impl WeightingScheme {
    pub fn weights(&self, counts: &ClassCounts) -> Result<ClassWeights> {
        match *self {
            WeightingScheme::InverseFreq => Ok(weighting::inverse_frequency_weights(counts)),
            WeightingScheme::EffectiveNumber { beta } => weighting::effective_number_weights(counts, beta),
        }
    }
}

/// Everything the driver needs besides data, model and LR schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPlan {
    pub total_epochs: usize,
    pub stage_boundary: usize,
    pub loss: LossKind,
    pub rebalance: RebalanceKind,
    pub mode: RebalanceMode,
    pub scheme: WeightingScheme,
    pub batch_size: usize,
    pub seed: u64,
    /// Largest margin for LDAM losses; the margin of the uniform-margin loss.
    pub max_margin: f64,
    pub margin_exponent: f64,
    pub focal_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Known test label counts; when set, LDAM margins follow the
    /// test-to-train count ratio instead of the training counts alone.
    pub test_counts: Option<Vec<usize>>,
}

impl Default for TrainingPlan {
    fn default() -> Self {
        Self {
            total_epochs: 200,
            stage_boundary: 160,
            loss: LossKind::LdamCe,
            rebalance: RebalanceKind::Reweight,
            mode: RebalanceMode::Deferred,
            scheme: WeightingScheme::InverseFreq,
            batch_size: 128,
            seed: 0,
            max_margin: 0.5,
            margin_exponent: 0.25,
            focal_gamma: 1.0,
            momentum: 0.9,
            weight_decay: 2e-4,
            test_counts: None,
        }
    }
}

impl TrainingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::invalid("total_epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.mode == RebalanceMode::Deferred
            && !(self.stage_boundary > 0 && self.stage_boundary <= self.total_epochs)
        {
            return Err(Error::invalid(
                "stage_boundary",
                format!("need 0 < T0 <= T, got T0 = {}, T = {}", self.stage_boundary, self.total_epochs),
            ));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::invalid("focal_gamma", "must be >= 0"));
        }
        if let WeightingScheme::EffectiveNumber { beta } = self.scheme {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::invalid("beta", "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Whether re-balancing (of either kind) is switched on at `epoch`.
    pub fn rebalance_active(&self, epoch: usize) -> bool {
        if self.rebalance == RebalanceKind::None {
            return false;
        }
        match self.mode {
            RebalanceMode::Never => false,
            RebalanceMode::Always => true,
            RebalanceMode::Deferred => epoch >= self.stage_boundary,
        }
    }

    /// Margins in the loss's own units (before any logit scaling).
    pub fn margins(&self, counts: &ClassCounts) -> Result<Option<MarginVector>> {
        match self.loss {
            LossKind::LdamCe | LossKind::LdamHinge => match &self.test_counts {
                Some(test) => {
                    let test = ClassCounts::new(test.clone())?;
                    theory::test_aware_margins(counts, &test, self.max_margin).map(Some)
                }
                None => losses::compute_ldam_margins(counts, self.max_margin, self.margin_exponent).map(Some),
            },
            LossKind::UniformMarginCe => {
                losses::uniform_margin_vector(counts.num_classes(), self.max_margin).map(Some)
            }
            LossKind::ErmCe | LossKind::Focal => Ok(None),
        }
    }

    /// The per-sample loss; margins are multiplied by `logit_scale` so they
    /// act in the same units as the logits.
    pub fn loss_fn(&self, counts: &ClassCounts, logit_scale: f64) -> Result<LossFn> {
        let margins = self.margins(counts)?.map(|m| m.scaled(logit_scale));
        Ok(match (self.loss, margins) {
            (LossKind::ErmCe, _) => LossFn::CrossEntropy,
            (LossKind::Focal, _) => LossFn::Focal {
                gamma: self.focal_gamma,
            },
            (LossKind::LdamHinge, Some(m)) => LossFn::MarginHinge(m),
            (_, Some(m)) => LossFn::MarginSoftmax(m),
            (_, None) => unreachable!("margin losses always produce margins"),
        })
    }
}

/// Class weights in force at `epoch`: uniform unless re-weighting is active.
pub fn stage_weights(plan: &TrainingPlan, epoch: usize, counts: &ClassCounts) -> Result<ClassWeights> {
    if plan.rebalance == RebalanceKind::Reweight && plan.rebalance_active(epoch) {
        plan.scheme.weights(counts)
    } else {
        Ok(ClassWeights::uniform(counts.num_classes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_error: f64,
    pub balanced_val_error: f64,
    pub per_class_val_error: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn to_csv(&self) -> String {
        let k = self.records.first().map_or(0, |r| r.per_class_val_error.len());
        let mut out = String::from("epoch,lr,train_loss,train_error,balanced_val_error");
        for j in 0..k {
            out.push_str(&format!(",val_error_class_{j}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.epoch, r.lr, r.train_loss, r.train_error, r.balanced_val_error
            ));
            for e in &r.per_class_val_error {
                out.push_str(&format!(",{e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Train `model` under `plan`, evaluating on the (balanced) validation set
/// after every epoch.
pub fn run_deferred_training(
    plan: &TrainingPlan,
    train: &Dataset,
    val: &Dataset,
    mut model: NormalizedClassifier,
    lr_schedule: &LrSchedule,
) -> Result<(NormalizedClassifier, TrainingLog)> {
    plan.validate()?;
    lr_schedule.validate()?;
    if train.k != model.num_classes() || val.k != train.k {
        return Err(Error::DimensionMismatch {
            what: "class count",
            expected: model.num_classes(),
            found: if train.k != model.num_classes() { train.k } else { val.k },
        });
    }
    if val.dim() != train.dim() {
        return Err(Error::DimensionMismatch {
            what: "validation feature width",
            expected: train.dim(),
            found: val.dim(),
        });
    }
    let counts = train.class_counts()?;
    let logit_scale = if model.config.normalize {
        model.config.scale
    } else {
        1.0
    };
    let loss = plan.loss_fn(&counts, logit_scale)?;
    let mut opt = OptimizerState::new(
        &model.params,
        lr_schedule.base_lr,
        plan.momentum,
        plan.weight_decay,
    )?;
    let n = train.len();
    let mut log = TrainingLog::default();

    for epoch in 0..plan.total_epochs {
        opt.lr = lr_schedule.learning_rate_at(epoch);
        let active = plan.rebalance_active(epoch);
        let order: Vec<usize> = if active && plan.rebalance == RebalanceKind::Resample {
            BalancedResampler::new(&train.labels, train.k, rng::derive_seed(plan.seed, "resample", epoch as u64))?
                .take(n)
                .collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng::rng_for(plan.seed, "shuffle", epoch as u64));
            idx
        };
        let class_weights = stage_weights(plan, epoch, &counts)?;
        let reweight = active && plan.rebalance == RebalanceKind::Reweight;

        let mut loss_sum = 0.0;
        for batch in order.chunks(plan.batch_size) {
            let x = train.features.select(Axis(0), batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let weights = if reweight {
                weighting::renormalize_batch(&class_weights, &labels)?
            } else {
                vec![1.0; labels.len()]
            };
            let (logits, cache) = model.forward(x.view())?;
            let (value, grad_logits) = losses::batch_loss(&loss, logits.view(), &labels, &weights)?;
            let grads = model.backward(&cache, grad_logits.view());
            sgd_step(&mut model.params, &grads, &mut opt);
            loss_sum += value * batch.len() as f64;
        }
        if !model.params.is_finite() {
            return Err(Error::invalid("lr", format!("training diverged at epoch {epoch}")));
        }

        let train_report = metrics::evaluate(&model, train)?;
        let val_report = metrics::evaluate(&model, val)?;
        log.records.push(EpochRecord {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / n as f64,
            train_error: train_report.overall_error,
            balanced_val_error: val_report.balanced_error,
            per_class_val_error: val_report.per_class_error,
        });
    }
    Ok((model, log))
}
