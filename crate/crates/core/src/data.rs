//! Imbalanced label distributions and datasets.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Per-class sample counts `n_j`, indexed by class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ClassCounts(Vec<usize>);

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::invalid("counts", "need at least two classes"));
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingClass(j));
        }
        Ok(Self(counts))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn max(&self) -> usize {
        *self.0.iter().max().expect("nonempty")
    }

    pub fn min(&self) -> usize {
        *self.0.iter().min().expect("nonempty")
    }

    /// `max_j n_j / min_j n_j`.
    pub fn imbalance_ratio(&self) -> f64 {
        self.max() as f64 / self.min() as f64
    }

    /// Index of the smallest class (lowest index on ties).
    pub fn argmin(&self) -> usize {
        let min = self.min();
        self.0.iter().position(|&c| c == min).expect("nonempty")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("counts serialize")
    }
}

impl TryFrom<Vec<usize>> for ClassCounts {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassCounts> for Vec<usize> {
    fn from(c: ClassCounts) -> Self {
        c.0
    }
}

impl std::ops::Index<usize> for ClassCounts {
    type Output = usize;

    fn index(&self, j: usize) -> &usize {
        &self.0[j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceKind {
    LongTailed,
    Step,
}

fn default_mu() -> f64 {
    0.5
}

/// Parameters of an artificially imbalanced class-count profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub kind: ImbalanceKind,
    pub n_max: usize,
    pub k: usize,
    pub rho: f64,
    /// Fraction of minority classes (step profiles only).
    #[serde(default = "default_mu")]
    pub mu: f64,
}

impl ImbalanceSpec {
    pub fn long_tailed(n_max: usize, k: usize, rho: f64) -> Self {
        Self {
            kind: ImbalanceKind::LongTailed,
            n_max,
            k,
            rho,
            mu: default_mu(),
        }
    }

    pub fn step(n_max: usize, k: usize, rho: f64, mu: f64) -> Self {
        Self {
            kind: ImbalanceKind::Step,
            n_max,
            k,
            rho,
            mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid("k", "need at least two classes"));
        }
        if self.n_max == 0 {
            return Err(Error::invalid("n_max", "must be positive"));
        }
        if !(self.rho.is_finite() && self.rho >= 1.0) {
            return Err(Error::invalid("rho", format!("must be finite and >= 1, got {}", self.rho)));
        }
        if self.n_max as f64 / self.rho < 1.0 {
            return Err(Error::invalid(
                "rho",
                format!("n_max / rho = {} leaves an empty class", self.n_max as f64 / self.rho),
            ));
        }
        if self.kind == ImbalanceKind::Step {
            if !(self.mu > 0.0 && self.mu < 1.0) {
                return Err(Error::invalid("mu", format!("must lie in (0, 1), got {}", self.mu)));
            }
            let minority = self.minority_classes();
            if minority == 0 || minority == self.k {
                return Err(Error::invalid(
                    "mu",
                    format!("floor(mu * k) = {minority} must be in [1, k - 1]"),
                ));
            }
        }
        Ok(())
    }

    fn minority_classes(&self) -> usize {
        (self.mu * self.k as f64).floor() as usize
    }

    pub fn counts(&self) -> Result<ClassCounts> {
        match self.kind {
            ImbalanceKind::LongTailed => long_tailed_counts(self),
            ImbalanceKind::Step => step_counts(self),
        }
    }
}

// floor() that forgives representation error when x is an integer in exact arithmetic
fn floor_count(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Exponentially decaying profile `n_j = floor(n_max * rho^(-j/(k-1)))`.
pub fn long_tailed_counts(spec: &ImbalanceSpec) -> Result<ClassCounts> {
    if spec.kind != ImbalanceKind::LongTailed {
        return Err(Error::invalid("kind", "expected a long-tailed spec"));
    }
    spec.validate()?;
    let last = (spec.k - 1) as f64;
    let counts = (0..spec.k)
        .map(|j| floor_count(spec.n_max as f64 * spec.rho.powf(-(j as f64) / last)))
        .collect();
    ClassCounts::new(counts)
}

/// Two-block profile: frequent classes first, then `floor(mu * k)` minority
/// classes of size `floor(n_max / rho)`.
pub fn step_counts(spec: &ImbalanceSpec) -> Result<ClassCounts> {
    if spec.kind != ImbalanceKind::Step {
        return Err(Error::invalid("kind", "expected a step spec"));
    }
    spec.validate()?;
    let minority = spec.minority_classes();
    let small = floor_count(spec.n_max as f64 / spec.rho);
    let counts = (0..spec.k)
        .map(|j| if j < spec.k - minority { spec.n_max } else { small })
        .collect();
    ClassCounts::new(counts)
}

/// Feature matrix with integer class labels in `[0, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub k: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, k: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "dataset rows",
                expected: labels.len(),
                found: features.nrows(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid("labels", format!("label {bad} out of range for k = {k}")));
        }
        Ok(Self { features, labels, k })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Per-class counts; fails if some class in `[0, k)` is absent.
    pub fn class_counts(&self) -> Result<ClassCounts> {
        let mut counts = vec![0usize; self.k];
        for &y in &self.labels {
            counts[y] += 1;
        }
        ClassCounts::new(counts)
    }

    /// Rows selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select(ndarray::Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            k: self.k,
        }
    }
}

/// Deterministic class centre: `separation * e_{j mod dim}`, pushed further
/// out by one `separation` for each wrap when `k > dim`.
pub fn class_mean(class: usize, dim: usize, separation: f64) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    mean[class % dim] = separation * (1 + class / dim) as f64;
    mean
}

/// Isotropic unit-variance Gaussian blobs, one per class, rows grouped by class.
pub fn sample_gaussian_mixture(
    counts: &ClassCounts,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if dim == 0 {
        return Err(Error::invalid("dim", "must be at least 1"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::invalid("separation", "must be positive"));
    }
    let n = counts.total();
    let mut rng = rng::rng_for(seed, "gaussian-mixture", 0);
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (j, &nj) in counts.as_slice().iter().enumerate() {
        let mean = class_mean(j, dim, separation);
        for _ in 0..nj {
            for (c, m) in mean.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                features[[row, c]] = m + z;
            }
            labels.push(j);
            row += 1;
        }
    }
    Dataset::new(features, labels, counts.num_classes())
}

/// A dataset read from CSV together with the original label values;
/// `original_labels[i]` is the file label that was compacted to class `i`.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub original_labels: Vec<i64>,
}

fn parse_label(field: &str) -> Option<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Some(v);
    }
    let f: f64 = field.parse().ok()?;
    (f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
}

/// Parse rows of `d` numeric features followed by one integer label.
pub fn read_csv<R: Read>(reader: R, has_header: bool) -> Result<LoadedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    let mut width: Option<usize> = None;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if record.len() < 2 {
            return Err(Error::Parse {
                line,
                message: "expected at least one feature and a label".into(),
            });
        }
        let d = record.len() - 1;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", w + 1, d + 1),
                })
            }
            _ => {}
        }
        for (i, field) in record.iter().take(d).enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("unparsable field {}", i + 1),
            })?;
            values.push(v);
        }
        let label = parse_label(&record[d]).ok_or_else(|| Error::Parse {
            line,
            message: format!("unparsable field {}", d + 1),
        })?;
        raw_labels.push(label);
    }

    let Some(d) = width else {
        return Err(Error::Empty("empty CSV file"));
    };
    let mapping: BTreeMap<i64, usize> = {
        let mut uniq: Vec<i64> = raw_labels.clone();
        uniq.sort_unstable();
        uniq.dedup();
        uniq.into_iter().enumerate().map(|(i, v)| (v, i)).collect()
    };
    let labels = raw_labels.iter().map(|v| mapping[v]).collect();
    let features = Array2::from_shape_vec((raw_labels.len(), d), values)
        .expect("row width checked per record");
    Ok(LoadedDataset {
        dataset: Dataset::new(features, labels, mapping.len())?,
        original_labels: mapping.into_keys().collect(),
    })
}

pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file), has_header)
}

/// Write features with 17 significant digits so values round-trip exactly.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    for (row, &y) in dataset.features.rows().into_iter().zip(&dataset.labels) {
        for v in row {
            write!(w, "{v:.16e},")?;
        }
        writeln!(w, "{y}")?;
    }
    w.flush()
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(dataset, file).map_err(|e| Error::io(path, e))
}

/// Endless i.i.d. index stream where each draw picks a class uniformly and
/// then a member of that class uniformly, so `P(i) = 1 / (k * n_{y_i})`.
#[derive(Debug, Clone)]
pub struct BalancedResampler {
    members: Vec<Vec<usize>>,
    rng: Rng,
}

impl BalancedResampler {
    pub fn new(labels: &[usize], k: usize, seed: u64) -> Result<Self> {
        let mut members = vec![Vec::new(); k];
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::invalid("labels", format!("label {y} out of range for k = {k}")));
            }
            members[y].push(i);
        }
        if let Some(j) = members.iter().position(Vec::is_empty) {
            return Err(Error::MissingClass(j));
        }
        Ok(Self {
            members,
            rng: rng::rng_for(seed, "balanced-resample", 0),
        })
    }
}

impl Iterator for BalancedResampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let class = &self.members[self.rng.random_range(0..self.members.len())];
        Some(class[self.rng.random_range(0..class.len())])
    }
}

/// Convenience constructor matching the labels' own class count.
pub fn balanced_resample_stream(labels: &[usize], seed: u64) -> Result<BalancedResampler> {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    BalancedResampler::new(labels, k, seed)
}
