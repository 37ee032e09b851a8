//! The `ldam` command line: dataset generation, training, evaluation,
//! margin-theory calculators and parameter sweeps.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use ldam_core::data::{self, ClassCounts, Dataset};
use ldam_core::experiment::{self, DatasetConfig, ExperimentConfig};
use ldam_core::losses;
use ldam_core::metrics;
use ldam_core::model::NormalizedClassifier;
use ldam_core::theory::{self, MarginProfile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Problems with flags or config documents; mapped to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "ldam", version, about = "Margin losses and deferred re-balancing for imbalanced classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the configured synthetic dataset and write train/val CSVs plus a counts manifest.
    Generate(ConfigArgs),
    /// Train a model and write checkpoint, logs and summary.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a CSV dataset.
    Evaluate(EvaluateArgs),
    /// Margin and bound calculators for given class counts.
    Theory(TheoryArgs),
    /// Train every cell of a cartesian grid of config overrides.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON experiment config; the built-in synthetic benchmark when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set schedule.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Root prepended to relative output directories.
    #[arg(long, env = "LDAM_OUTPUT_ROOT")]
    pub output_root: Option<PathBuf>,
    /// Shorthand for `loss.kind`.
    #[arg(long)]
    pub loss: Option<String>,
    /// Shorthand for `rebalance.kind`.
    #[arg(long)]
    pub rebalance: Option<String>,
    /// Shorthand for `rebalance.mode`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Shorthand for `schedule.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Shorthand for `model.scale`.
    #[arg(long)]
    pub scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV of feature columns followed by an integer label in `0..k`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub has_header: bool,
    /// Where to write the report; defaults to `eval-<data stem>.json` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    /// Training counts per class, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub counts: Vec<usize>,
    /// Test counts per class for test-aware margins.
    #[arg(long, value_delimiter = ',')]
    pub test_counts: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.5)]
    pub max_margin: f64,
    #[arg(long, default_value_t = 0.25)]
    pub exponent: f64,
    /// Complexity term of the balanced generalization bound.
    #[arg(long, default_value_t = 1.0)]
    pub complexity: f64,
    /// Include the `log n / sqrt(n_j)` term in the bound.
    #[arg(long)]
    pub log_n_term: bool,
    /// Margin budget `γ1 + γ2` for the two-class split.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub base: ConfigArgs,
    /// Grid axis, e.g. `--axis loss.kind=erm_ce,ldam_ce`. Repeatable; the first axis varies slowest.
    #[arg(long = "axis", value_name = "KEY=V1,V2,...", required = true)]
    pub axes: Vec<String>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output CSV; defaults to `sweep.csv` in the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<ldam_core::Error>() {
        Some(e) if e.is_config_error() => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Theory(args) => cmd_theory(&args),
        Command::Sweep(args) => cmd_sweep(&args),
    }
}

fn config_document(args: &ConfigArgs) -> Result<Value> {
    let mut doc = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| config_error(format!("config {} is not valid JSON: {e}", path.display())))?
        }
        None => ExperimentConfig::benchmark().to_value(),
    };
    let mut set = |key: &str, value: Value| experiment::set_path(&mut doc, key, value);
    if let Some(seed) = args.seed {
        set("seed", json!(seed))?;
    }
    if let Some(dir) = &args.output_dir {
        set("output_dir", json!(dir))?;
    }
    if let Some(v) = &args.loss {
        set("loss.kind", json!(v))?;
    }
    if let Some(v) = &args.rebalance {
        set("rebalance.kind", json!(v))?;
    }
    if let Some(v) = &args.mode {
        set("rebalance.mode", json!(v))?;
    }
    if let Some(v) = args.epochs {
        set("schedule.epochs", json!(v))?;
    }
    if let Some(v) = args.scale {
        set("model.scale", json!(v))?;
    }
    for spec in &args.overrides {
        let (key, value) = experiment::parse_override(spec)?;
        experiment::set_path(&mut doc, &key, value)?;
    }
    Ok(doc)
}

/// Build and validate the experiment config described by the flags.
pub fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::from_value(config_document(args)?)?;
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig, root: Option<&Path>) -> PathBuf {
    match root {
        Some(root) if cfg.output_dir.is_relative() => root.join(&cfg.output_dir),
        _ => cfg.output_dir.clone(),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn pretty(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn cmd_generate(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (dim, separation) = match &cfg.dataset {
        DatasetConfig::Synthetic { dim, separation, .. } => (*dim, *separation),
        DatasetConfig::Csv { .. } => bail!(config_error("generate needs a synthetic dataset block")),
    };
    let (train, val) = cfg.datasets()?;
    let dir = output_dir(&cfg, args.output_root.as_deref());
    create_dir(&dir)?;
    data::save_csv(&train, dir.join("train.csv"))?;
    data::save_csv(&val, dir.join("val.csv"))?;
    let train_counts = train.class_counts()?;
    let manifest = json!({
        "train_counts": train_counts,
        "val_counts": val.class_counts()?,
        "imbalance_ratio": train_counts.imbalance_ratio(),
        "dim": dim,
        "separation": separation,
        "seed": cfg.seed,
    });
    write_file(&dir.join("counts.json"), pretty(&manifest))?;
    print!("{}", pretty(&manifest));
    Ok(())
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = output_dir(&cfg, args.output_root.as_deref());
    let outcome = experiment::run(&cfg)?;
    create_dir(&dir)?;
    outcome.model.save(dir.join("checkpoint.json"))?;
    write_file(&dir.join("log.jsonl"), outcome.log.to_jsonl())?;
    write_file(&dir.join("log.csv"), outcome.log.to_csv())?;
    write_file(&dir.join("summary.json"), pretty(&outcome.summary))?;
    write_file(&dir.join("eval.json"), pretty(&outcome.report))?;
    write_file(&dir.join("per_class.csv"), outcome.report.per_class_csv())?;
    let s = &outcome.summary;
    println!(
        "epochs {}  balanced error {:.4}  overall error {:.4}  per-class {:?}",
        s.epochs, s.final_balanced_error, s.final_overall_error, s.final_per_class_error
    );
    println!("wrote {}", dir.display());
    Ok(())
}

/// Read a CSV whose labels are already class indices of a `k`-class model.
fn load_indexed_csv(path: &Path, has_header: bool, k: usize) -> Result<Dataset> {
    let loaded = data::load_csv(path, has_header)?;
    let mut labels = Vec::with_capacity(loaded.dataset.len());
    for &compact in &loaded.dataset.labels {
        let original = loaded.original_labels[compact];
        if original < 0 || original as usize >= k {
            bail!(
                "{}: label {original} is outside 0..{k} for a {k}-class model",
                path.display()
            );
        }
        labels.push(original as usize);
    }
    Ok(Dataset::new(loaded.dataset.features, labels, k)?)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let model = NormalizedClassifier::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let k = model.config.classes;
    let dataset = load_indexed_csv(&args.data, args.has_header, k)?;
    if dataset.dim() != model.config.input_dim {
        return Err(ldam_core::Error::DimensionMismatch {
            what: "feature columns (checkpoint input_dim vs dataset)",
            expected: model.config.input_dim,
            found: dataset.dim(),
        }
        .into());
    }
    let report = metrics::evaluate(&model, &dataset)?;
    let out = args.out.clone().unwrap_or_else(|| {
        let stem = args.data.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{stem}.json"))
    });
    let text = pretty(&report);
    write_file(&out, &text)?;
    print!("{text}");
    Ok(())
}

/// The JSON document printed by `ldam theory`.
pub fn theory_report(args: &TheoryArgs) -> Result<Value> {
    let counts = ClassCounts::new(args.counts.clone())?;
    let k = counts.num_classes();
    let ldam = losses::compute_ldam_margins(&counts, args.max_margin, args.exponent)?;
    let profile = theory::optimal_margin_profile(&counts, args.max_margin)?;
    let mean = profile.as_slice().iter().sum::<f64>() / k as f64;
    let uniform = MarginProfile::new(vec![mean; k])?;
    let bound = |p: &MarginProfile| theory::balanced_bound(p, &counts, args.complexity, args.log_n_term);
    let mut doc = json!({
        "counts": counts,
        "max_margin": args.max_margin,
        "exponent": args.exponent,
        "ldam_margins": ldam,
        "optimal_margin_profile": profile,
        "balanced_bound": {
            "optimal_profile": bound(&profile)?,
            "uniform_same_total": bound(&uniform)?,
            "complexity": args.complexity,
            "log_n_term": args.log_n_term,
        },
    });
    let mut notes = Vec::new();
    if k == 2 {
        let (g1, g2) = theory::optimal_binary_margins(counts[0], counts[1], args.beta)?;
        doc["optimal_binary_margins"] = json!({"beta": args.beta, "gamma1": g1, "gamma2": g2});
    } else {
        notes.push(format!("optimal_binary_margins omitted: needs exactly 2 classes, got {k}"));
    }
    if let Some(test) = &args.test_counts {
        let test = ClassCounts::new(test.clone())?;
        doc["test_counts"] = json!(test);
        doc["test_aware_margins"] = json!(theory::test_aware_margins(&counts, &test, args.max_margin)?);
    }
    if !notes.is_empty() {
        doc["notes"] = json!(notes);
    }
    Ok(doc)
}

fn cmd_theory(args: &TheoryArgs) -> Result<()> {
    print!("{}", pretty(&theory_report(args)?));
    Ok(())
}

/// Split on commas that are not nested inside brackets or braces.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in s.char_indices() {
        match c {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub raw: Vec<String>,
}

pub fn parse_axis(spec: &str) -> Result<Axis> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| config_error(format!("axis `{spec}` is not KEY=V1,V2,...")))?;
    let raw: Vec<String> = split_top_level(values).into_iter().map(|v| v.trim().to_string()).collect();
    if key.trim().is_empty() || raw.iter().any(String::is_empty) {
        bail!(config_error(format!("axis `{spec}` has an empty key or value")));
    }
    Ok(Axis {
        key: key.trim().to_string(),
        raw,
    })
}

/// Cartesian product of axis value indices, first axis slowest.
fn grid(axes: &[Axis]) -> Vec<Vec<usize>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|prefix| {
                (0..axis.raw.len()).map(move |i| {
                    let mut cell = prefix.clone();
                    cell.push(i);
                    cell
                })
            })
            .collect()
    })
}

struct CellResult {
    values: Vec<String>,
    outcome: std::result::Result<ldam_core::metrics::Summary, String>,
}

fn run_cell(template: &Value, axes: &[Axis], cell: &[usize]) -> CellResult {
    let values: Vec<String> = axes.iter().zip(cell).map(|(a, &i)| a.raw[i].clone()).collect();
    let attempt = || -> Result<ldam_core::metrics::Summary> {
        let mut doc = template.clone();
        for (axis, raw) in axes.iter().zip(&values) {
            let (_, value) = experiment::parse_override(&format!("{}={raw}", axis.key))?;
            experiment::set_path(&mut doc, &axis.key, value)?;
        }
        let cfg = ExperimentConfig::from_value(doc)?;
        Ok(experiment::run(&cfg)?.summary)
    };
    let outcome = attempt().map_err(|e| format!("{e:#}"));
    CellResult { values, outcome }
}

fn sweep_csv(axes: &[Axis], results: &[CellResult]) -> Result<String> {
    let k = results
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .map(|s| s.final_per_class_error.len())
        .max()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["cell".into()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(["status", "final_balanced_error", "final_overall_error"].map(String::from));
    header.extend((0..k).map(|j| format!("error_class_{j}")));
    header.push("message".into());
    w.write_record(&header)?;
    for (i, r) in results.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(r.values.iter().cloned());
        match &r.outcome {
            Ok(s) => {
                row.extend(["ok".to_string(), s.final_balanced_error.to_string(), s.final_overall_error.to_string()]);
                row.extend((0..k).map(|j| s.final_per_class_error.get(j).map_or(String::new(), f64::to_string)));
                row.push(String::new());
            }
            Err(msg) => {
                row.extend(["failed".to_string(), String::new(), String::new()]);
                row.extend((0..k).map(|_| String::new()));
                row.push(msg.clone());
            }
        }
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?)
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let template = config_document(&args.base)?;
    // the template itself must parse even if individual cells later fail
    let base_cfg = ExperimentConfig::from_value(template.clone())?;
    let axes = args.axes.iter().map(|s| parse_axis(s)).collect::<Result<Vec<_>>>()?;
    let cells = grid(&axes);
    let work = || -> Vec<CellResult> { cells.par_iter().map(|c| run_cell(&template, &axes, c)).collect() };
    let results = match args.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .context("starting worker pool")?
            .install(work),
        None => work(),
    };
    let table = sweep_csv(&axes, &results)?;
    let out = match &args.out {
        Some(p) => p.clone(),
        None => output_dir(&base_cfg, args.base.output_root.as_deref()).join("sweep.csv"),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&out, &table)?;
    print!("{table}");
    let failed = results.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", results.len());
    }
    Ok(())
}
