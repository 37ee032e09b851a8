//! A small classifier with an optional cosine output layer.
//!
//! Architecture: optional ReLU hidden layer, then a final layer producing `k`
//! logits. With `normalize` set, the final layer computes
//! `s * <φ(x)/‖φ(x)‖, W_j/‖W_j‖>`, so every logit lies in `[-s, s]`; otherwise
//! it is a plain affine map `W φ(x) + b`. A fixed, untrained per-class logit
//! offset is added in both modes (zero unless set explicitly).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Norm floor below which a vector normalizes to zero.
pub const NORM_EPS: f64 = 1e-12;

pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < NORM_EPS {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

fn default_scale() -> f64 {
    30.0
}

fn default_normalize() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub classes: usize,
    /// Width of the ReLU hidden layer; 0 means a linear model.
    #[serde(default)]
    pub hidden: usize,
    #[serde(default = "default_normalize")]
    pub normalize: bool,
    /// Logit scale `s` of the cosine layer.
    #[serde(default = "default_scale")]
    pub scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("classes", "need at least two classes"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid("scale", "must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        if self.hidden > 0 {
            self.hidden
        } else {
            self.input_dim
        }
    }
}

/// Trainable tensors. Also used for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub hidden_weight: Option<Array2<f64>>,
    pub hidden_bias: Option<Array1<f64>>,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// A named flat view of one tensor.
pub struct Tensor<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: &'static str,
    pub data: &'a mut [f64],
}

impl Parameters {
    pub fn zeros_like(other: &Parameters) -> Self {
        Self {
            hidden_weight: other.hidden_weight.as_ref().map(|w| Array2::zeros(w.raw_dim())),
            hidden_bias: other.hidden_bias.as_ref().map(|b| Array1::zeros(b.raw_dim())),
            weight: Array2::zeros(other.weight.raw_dim()),
            bias: Array1::zeros(other.bias.raw_dim()),
        }
    }

    pub fn tensors(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::with_capacity(4);
        if let (Some(w), Some(b)) = (&self.hidden_weight, &self.hidden_bias) {
            out.push(Tensor {
                name: "hidden_weight",
                shape: w.shape().to_vec(),
                data: w.as_slice().expect("standard layout"),
            });
            out.push(Tensor {
                name: "hidden_bias",
                shape: b.shape().to_vec(),
                data: b.as_slice().expect("standard layout"),
            });
        }
        out.push(Tensor {
            name: "weight",
            shape: self.weight.shape().to_vec(),
            data: self.weight.as_slice().expect("standard layout"),
        });
        out.push(Tensor {
            name: "bias",
            shape: self.bias.shape().to_vec(),
            data: self.bias.as_slice().expect("standard layout"),
        });
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::with_capacity(4);
        if let (Some(w), Some(b)) = (&mut self.hidden_weight, &mut self.hidden_bias) {
            out.push(TensorMut {
                name: "hidden_weight",
                data: w.as_slice_mut().expect("standard layout"),
            });
            out.push(TensorMut {
                name: "hidden_bias",
                data: b.as_slice_mut().expect("standard layout"),
            });
        }
        out.push(TensorMut {
            name: "weight",
            data: self.weight.as_slice_mut().expect("standard layout"),
        });
        out.push(TensorMut {
            name: "bias",
            data: self.bias.as_slice_mut().expect("standard layout"),
        });
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with("bias")
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedClassifier {
    pub config: ModelConfig,
    pub params: Parameters,
    /// Untrained per-class offsets added to the logits.
    pub logit_offset: Array1<f64>,
}

/// Intermediates saved by [`NormalizedClassifier::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    pre_activation: Option<Array2<f64>>,
    features: Array2<f64>,
    cosine: Option<CosineCache>,
}

#[derive(Debug, Clone)]
struct CosineCache {
    unit_features: Array2<f64>,
    feature_norms: Array1<f64>,
    unit_weight: Array2<f64>,
    weight_norms: Array1<f64>,
}

fn normalize_rows(m: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut unit = m.clone();
    let mut norms = Array1::zeros(m.nrows());
    for (mut row, n) in unit.rows_mut().into_iter().zip(norms.iter_mut()) {
        let norm = row.dot(&row).sqrt();
        *n = norm;
        if norm < NORM_EPS {
            row.fill(0.0);
        } else {
            row /= norm;
        }
    }
    (unit, norms)
}

/// Gradient through row normalization: `(I - û ûᵀ) g / ‖v‖`, zero below the floor.
fn normalize_rows_backward(unit: &Array2<f64>, norms: &Array1<f64>, grad_unit: &Array2<f64>) -> Array2<f64> {
    let mut out = grad_unit.clone();
    Zip::from(out.rows_mut())
        .and(unit.rows())
        .and(norms)
        .for_each(|mut g, u, &n| {
            if n < NORM_EPS {
                g.fill(0.0);
            } else {
                let proj = u.dot(&g);
                g.scaled_add(-proj, &u);
                g /= n;
            }
        });
    out
}

impl NormalizedClassifier {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_for(seed, "init", 0);
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
        };
        let (hidden_weight, hidden_bias) = if config.hidden > 0 {
            (
                Some(uniform(config.hidden, config.input_dim)),
                Some(Array1::zeros(config.hidden)),
            )
        } else {
            (None, None)
        };
        let weight = uniform(config.classes, config.feature_dim());
        let params = Parameters {
            hidden_weight,
            hidden_bias,
            weight,
            bias: Array1::zeros(config.classes),
        };
        Ok(Self {
            logit_offset: Array1::zeros(config.classes),
            config,
            params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.classes
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                what: "feature width",
                expected: self.config.input_dim,
                found: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let p = &self.params;
        let (pre_activation, features) = match (&p.hidden_weight, &p.hidden_bias) {
            (Some(w1), Some(b1)) => {
                let pre = x.dot(&w1.t()) + b1;
                let act = pre.mapv(|v| v.max(0.0));
                (Some(pre), act)
            }
            _ => (None, x.to_owned()),
        };
        let (mut logits, cosine) = if self.config.normalize {
            let (unit_features, feature_norms) = normalize_rows(&features);
            let (unit_weight, weight_norms) = normalize_rows(&p.weight);
            let logits = unit_features.dot(&unit_weight.t()) * self.config.scale;
            (
                logits,
                Some(CosineCache {
                    unit_features,
                    feature_norms,
                    unit_weight,
                    weight_norms,
                }),
            )
        } else {
            (features.dot(&p.weight.t()) + &p.bias, None)
        };
        logits += &self.logit_offset;
        Ok((
            logits,
            ForwardCache {
                input: x.to_owned(),
                pre_activation,
                features,
                cosine,
            },
        ))
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward(x).map(|(z, _)| z)
    }

    /// Exact parameter gradients of the scalar whose logit gradient is
    /// `grad_logits`. `cache` must come from a forward pass with the current
    /// parameters.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: ArrayView2<'_, f64>) -> Parameters {
        let p = &self.params;
        let (grad_weight, grad_bias, grad_features) = match &cache.cosine {
            Some(c) => {
                let s = self.config.scale;
                let grad_unit_features = grad_logits.dot(&c.unit_weight) * s;
                let grad_unit_weight = grad_logits.t().dot(&c.unit_features) * s;
                (
                    standard(normalize_rows_backward(&c.unit_weight, &c.weight_norms, &grad_unit_weight)),
                    Array1::zeros(self.config.classes),
                    normalize_rows_backward(&c.unit_features, &c.feature_norms, &grad_unit_features),
                )
            }
            None => (
                standard(grad_logits.t().dot(&cache.features)),
                grad_logits.sum_axis(Axis(0)),
                grad_logits.dot(&p.weight),
            ),
        };
        let (hidden_weight, hidden_bias) = match &cache.pre_activation {
            Some(pre) => {
                let mut grad_pre = grad_features;
                Zip::from(&mut grad_pre).and(pre).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                (
                    Some(standard(grad_pre.t().dot(&cache.input))),
                    Some(grad_pre.sum_axis(Axis(0))),
                )
            }
            None => (None, None),
        };
        Parameters {
            hidden_weight,
            hidden_bias,
            weight: grad_weight,
            bias: grad_bias,
        }
    }

    /// Argmax over logits; ties go to the lowest class index.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(self.logits(x)?.view()))
    }

    /// The representation entering the output layer, unit-normalized when the
    /// cosine layer is active.
    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (_, cache) = self.forward(x)?;
        Ok(match cache.cosine {
            Some(c) => c.unit_features,
            None => cache.features,
        })
    }

    pub fn set_logit_offset(&mut self, offset: &[f64]) -> Result<()> {
        if offset.len() != self.config.classes {
            return Err(Error::DimensionMismatch {
                what: "logit offset",
                expected: self.config.classes,
                found: offset.len(),
            });
        }
        self.logit_offset = Array1::from(offset.to_vec());
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: BTreeMap<String, TensorRecord> = self
            .params
            .tensors()
            .into_iter()
            .map(|t| {
                (
                    t.name.to_string(),
                    TensorRecord {
                        shape: t.shape,
                        data: t.data.to_vec(),
                    },
                )
            })
            .collect();
        tensors.insert(
            "logit_offset".into(),
            TensorRecord {
                shape: vec![self.config.classes],
                data: self.logit_offset.to_vec(),
            },
        );
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: self.config.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format `{}`", ckpt.format)));
        }
        ckpt.model.validate()?;
        let mut tensors = ckpt.tensors;
        let cfg = &ckpt.model;
        let mut take2 = |name: &'static str, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape != [rows, cols] {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, expected [{rows}, {cols}]",
                    t.shape
                )));
            }
            Array2::from_shape_vec((rows, cols), t.data)
                .map_err(|e| Error::Config(format!("tensor `{name}`: {e}")))
        };
        let (hidden_weight, weight) = if cfg.hidden > 0 {
            (
                Some(take2("hidden_weight", cfg.hidden, cfg.input_dim)?),
                take2("weight", cfg.classes, cfg.hidden)?,
            )
        } else {
            (None, take2("weight", cfg.classes, cfg.input_dim)?)
        };
        let mut take1 = |name: &'static str, len: usize| -> Result<Array1<f64>> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape != [len] || t.data.len() != len {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, expected [{len}]",
                    t.shape
                )));
            }
            Ok(Array1::from(t.data))
        };
        let hidden_bias = if cfg.hidden > 0 {
            Some(take1("hidden_bias", cfg.hidden)?)
        } else {
            None
        };
        let bias = take1("bias", cfg.classes)?;
        let logit_offset = take1("logit_offset", cfg.classes)?;
        let params = Parameters {
            hidden_weight,
            hidden_bias,
            weight,
            bias,
        };
        if !params.is_finite() {
            return Err(Error::Config("checkpoint contains non-finite parameters".into()));
        }
        Ok(Self {
            config: ckpt.model,
            params,
            logit_offset,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

pub fn argmax_rows(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub const CHECKPOINT_FORMAT: &str = "ldam-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk model: architecture plus named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub tensors: BTreeMap<String, TensorRecord>,
}

/// Momentum SGD state with coupled L2 weight decay (biases exempt).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Parameters,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(params: &Parameters, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", format!("must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        Ok(Self {
            velocity: Parameters::zeros_like(params),
            momentum,
            weight_decay,
            lr,
        })
    }
}

/// `v ← μ v + g + λ θ` (λ = 0 for biases), then `θ ← θ − lr v`.
pub fn sgd_step(params: &mut Parameters, grads: &Parameters, state: &mut OptimizerState) {
    let (mu, wd, lr) = (state.momentum, state.weight_decay, state.lr);
    let grads = grads.tensors();
    for ((p, v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(state.velocity.tensors_mut())
        .zip(grads)
    {
        assert_eq!(p.name, g.name, "parameter/gradient layout mismatch");
        assert_eq!(p.data.len(), g.data.len(), "shape mismatch for `{}`", p.name);
        let decay = if is_bias(p.name) { 0.0 } else { wd };
        for ((theta, vel), grad) in p.data.iter_mut().zip(v.data.iter_mut()).zip(g.data) {
            *vel = mu * *vel + grad + decay * *theta;
            *theta -= lr * *vel;
        }
    }
}
