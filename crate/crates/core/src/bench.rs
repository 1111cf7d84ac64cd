//! Split / lambda-grid benchmark protocol: 14 seeded 60/20/20 splits, lambda selected on the
//! validation split, test loss reported per split, plus per-pass training diagnostics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, DataFormat, Dataset, Standardizer};
use crate::error::{M4nError, Result};
use crate::kernel::{median_heuristic, KernelSpec};
use crate::loss::{TaskKind, TaskSpec};
use crate::trainer::{train, Method, OracleBudget, TrainConfig};

pub const DEFAULT_SPLITS: usize = 14;

/// `2^-1, ..., 2^-10`.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=10).map(|j| 2f64.powi(-j)).collect()
}

/// Gaussian width: the median heuristic on the training split, or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum KernelGamma {
    #[default]
    Median,
    Fixed(f64),
}

impl FromStr for KernelGamma {
    type Err = M4nError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "median" {
            return Ok(KernelGamma::Median);
        }
        match s.parse::<f64>() {
            Ok(g) if g > 0.0 && g.is_finite() => Ok(KernelGamma::Fixed(g)),
            _ => Err(M4nError::Config(format!("kernel gamma must be 'median' or a positive number, got '{s}'"))),
        }
    }
}

impl Serialize for KernelGamma {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KernelGamma::Median => s.serialize_str("median"),
            KernelGamma::Fixed(g) => s.serialize_f64(*g),
        }
    }
}

impl<'de> Deserialize<'de> for KernelGamma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(g) => KernelGamma::from_str(&g.to_string()),
            Raw::Text(s) => KernelGamma::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    #[default]
    Fixed,
    Schedule,
    Exact,
}

/// Tabular label semantics; other formats determine the task themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TabularTask {
    #[default]
    Multiclass,
    Ordinal,
}

fn default_methods() -> Vec<Method> {
    vec![Method::M4n]
}
fn default_splits() -> usize {
    DEFAULT_SPLITS
}
fn default_passes() -> usize {
    30
}
fn default_spmp_iters() -> usize {
    20
}
fn default_true() -> bool {
    true
}
fn default_gap_iters() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Name used in the output tables; defaults to the dataset file stem.
    #[serde(default)]
    pub name: Option<String>,
    /// Relative paths resolve against the config file's directory.
    pub dataset: PathBuf,
    #[serde(default = "default_format")]
    pub format: DataFormat,
    #[serde(default)]
    pub task: TabularTask,
    /// Number of classes for tabular data; inferred from the largest label when absent.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_splits")]
    pub splits: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(default = "default_passes")]
    pub passes: usize,
    #[serde(default)]
    pub oracle: OracleKind,
    /// Saddle-point rounds per oracle call (cap for the schedule budget).
    #[serde(default = "default_spmp_iters")]
    pub spmp_iters: usize,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default)]
    pub kernel_gamma: KernelGamma,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default = "default_true")]
    pub track_gap: bool,
    #[serde(default = "default_gap_iters")]
    pub gap_oracle_iters: usize,
    #[serde(default)]
    pub record_timing: bool,
}

fn default_format() -> DataFormat {
    DataFormat::Tabular
}

impl BenchConfig {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        Self {
            name: None,
            dataset: dataset.into(),
            format: DataFormat::Tabular,
            task: TabularTask::Multiclass,
            classes: None,
            methods: default_methods(),
            splits: DEFAULT_SPLITS,
            seed: 0,
            lambda_grid: None,
            passes: default_passes(),
            oracle: OracleKind::Fixed,
            spmp_iters: default_spmp_iters(),
            warm_start: true,
            kernel_gamma: KernelGamma::Median,
            standardize: true,
            track_gap: true,
            gap_oracle_iters: default_gap_iters(),
            record_timing: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| M4nError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config and resolves the dataset path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| M4nError::Io { path: path.display().to_string(), message: e.to_string() })?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset = dir.join(&cfg.dataset);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits == 0 || self.passes == 0 || self.spmp_iters == 0 {
            return Err(M4nError::Config("splits, passes and spmp_iters must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(M4nError::Config("at least one method is required".into()));
        }
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                return Err(M4nError::Config("lambda grid must be non-empty and positive".into()));
            }
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.lambda_grid.clone().unwrap_or_else(default_lambda_grid)
    }

    pub fn dataset_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into()))
    }

    pub fn oracle_budget(&self) -> OracleBudget {
        match self.oracle {
            OracleKind::Fixed => OracleBudget::Fixed { iterations: self.spmp_iters },
            OracleKind::Schedule => OracleBudget::Schedule { max_iters: self.spmp_iters },
            OracleKind::Exact => OracleBudget::Exact,
        }
    }

    fn oracle_k(&self) -> Option<usize> {
        (self.oracle != OracleKind::Exact).then_some(self.spmp_iters)
    }
}

/// One training run: a (split, method, lambda) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub method: Method,
    pub split: usize,
    pub split_seed: u64,
    pub lambda: f64,
    pub kernel_gamma: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    pub passes: usize,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub warm_start: bool,
    pub selected: bool,
    pub wall_ms: Option<f64>,
}

/// Per-pass training diagnostics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub dataset: String,
    pub method: Method,
    pub split_seed: u64,
    pub lambda: f64,
    pub pass: usize,
    pub dual_objective: f64,
    pub dual_gap: Option<f64>,
    pub mean_oracle_gap: f64,
    pub mean_oracle_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    pub method: Method,
    pub task: TaskKind,
    pub split_seeds: Vec<u64>,
    pub test_losses: Vec<f64>,
    pub selected_lambdas: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over splits.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: BenchConfig,
    pub dataset_hash: String,
    pub results: Vec<ExperimentResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutput {
    pub summary: BenchSummary,
    pub runs: Vec<RunRecord>,
    pub diagnostics: Vec<DiagnosticRecord>,
}

/// Seed of split `index`, a pure function of the dataset hash and the base seed.
pub fn split_seed(dataset_hash: &str, seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(dataset_hash.as_bytes());
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Train / validation / test indices with 60 / 20 / 20 proportions.
pub fn split_indices(n: usize, split_seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_train = (0.6 * n as f64).round() as usize;
    let n_val = (0.2 * n as f64).round() as usize;
    let test = idx.split_off((n_train + n_val).min(n));
    let val = idx.split_off(n_train.min(idx.len()));
    (idx, val, test)
}

fn resolve_task(cfg: &BenchConfig, data: &Dataset) -> Result<TaskSpec> {
    match (cfg.format, cfg.classes) {
        (DataFormat::Tabular, Some(k)) => match cfg.task {
            TabularTask::Multiclass => TaskSpec::multiclass(k),
            TabularTask::Ordinal => TaskSpec::ordinal(k),
        },
        _ => data.infer_task(cfg.format, cfg.task == TabularTask::Ordinal),
    }
}

struct Split {
    seed: u64,
    train: Dataset,
    val: Dataset,
    test: Dataset,
    gamma: f64,
}

fn prepare_split(cfg: &BenchConfig, data: &Dataset, seed: u64) -> Result<Split> {
    let (tr, va, te) = split_indices(data.len(), seed);
    let (mut train, mut val, mut test) = (data.subset(&tr), data.subset(&va), data.subset(&te));
    if cfg.standardize {
        let st = Standardizer::fit(&train);
        train = st.apply(&train);
        val = st.apply(&val);
        test = st.apply(&test);
    }
    let gamma = match cfg.kernel_gamma {
        KernelGamma::Median => median_heuristic(&train.inputs, seed)?,
        KernelGamma::Fixed(g) => g,
    };
    Ok(Split { seed, train, val, test, gamma })
}

/// Runs the protocol on an already loaded dataset.
pub fn run_benchmark_on(cfg: &BenchConfig, data: &Dataset) -> Result<BenchOutput> {
    cfg.validate()?;
    let task = resolve_task(cfg, data)?;
    data.validate(&task)?;
    if data.len() < 5 {
        return Err(M4nError::InvalidArgument(format!("need at least 5 examples to split, got {}", data.len())));
    }
    let name = cfg.dataset_name();
    let hash = data.content_hash();
    let splits = (0..cfg.splits)
        .map(|s| prepare_split(cfg, data, split_seed(&hash, cfg.seed, s)))
        .collect::<Result<Vec<_>>>()?;
    let lambdas = cfg.lambdas();

    let mut jobs: Vec<(usize, Method, f64)> = Vec::new();
    for s in 0..splits.len() {
        for &m in &cfg.methods {
            jobs.extend(lambdas.iter().map(|&l| (s, m, l)));
        }
    }
    let trained = jobs
        .par_iter()
        .map(|&(s, method, lambda)| {
            let split = &splits[s];
            let tc = TrainConfig {
                passes: cfg.passes,
                lambda,
                oracle: cfg.oracle_budget(),
                warm_start: cfg.warm_start,
                seed: split.seed,
                method,
                kernel: KernelSpec::Gaussian { gamma: split.gamma },
                track_gap: cfg.track_gap,
                gap_oracle_iters: cfg.gap_oracle_iters,
                record_timing: cfg.record_timing,
                ..TrainConfig::default()
            };
            let (model, report) = train(&split.train, &task, &tc)?;
            let val_loss = model.evaluate(&split.val)?;
            let test_loss = model.evaluate(&split.test)?;
            let run = RunRecord {
                dataset: name.clone(),
                method,
                split: s,
                split_seed: split.seed,
                lambda,
                kernel_gamma: split.gamma,
                val_loss,
                test_loss,
                passes: cfg.passes,
                k: cfg.oracle_k(),
                warm_start: cfg.warm_start,
                selected: false,
                wall_ms: report.last().wall_ms,
            };
            let diags = report
                .passes
                .iter()
                .map(|p| DiagnosticRecord {
                    dataset: name.clone(),
                    method,
                    split_seed: split.seed,
                    lambda,
                    pass: p.pass,
                    dual_objective: p.dual_objective,
                    dual_gap: p.dual_gap,
                    mean_oracle_gap: p.mean_oracle_gap,
                    mean_oracle_iterations: p.mean_oracle_iterations,
                })
                .collect::<Vec<_>>();
            Ok((run, diags))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut runs = Vec::with_capacity(trained.len());
    let mut diagnostics = Vec::new();
    for (r, d) in trained {
        runs.push(r);
        diagnostics.extend(d);
    }

    let mut results = Vec::new();
    for &method in &cfg.methods {
        let mut test_losses = Vec::new();
        let mut selected_lambdas = Vec::new();
        for s in 0..splits.len() {
            // first grid entry wins ties
            let best = runs
                .iter()
                .enumerate()
                .filter(|(_, r)| r.split == s && r.method == method)
                .fold(None::<(usize, f64)>, |acc, (i, r)| match acc {
                    Some((_, v)) if v <= r.val_loss => acc,
                    _ => Some((i, r.val_loss)),
                })
                .map(|(i, _)| i)
                .expect("every split has runs");
            runs[best].selected = true;
            test_losses.push(runs[best].test_loss);
            selected_lambdas.push(runs[best].lambda);
        }
        results.push(summarize(&name, method, task.kind(), splits.iter().map(|s| s.seed).collect(), test_losses, selected_lambdas));
    }
    Ok(BenchOutput { summary: BenchSummary { config: cfg.clone(), dataset_hash: hash, results }, runs, diagnostics })
}

fn summarize(dataset: &str, method: Method, task: TaskKind, split_seeds: Vec<u64>, test_losses: Vec<f64>, selected_lambdas: Vec<f64>) -> ExperimentResult {
    let n = test_losses.len() as f64;
    let mean = test_losses.iter().sum::<f64>() / n;
    let std = if test_losses.len() > 1 { (test_losses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    let min = test_losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = test_losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ExperimentResult { dataset: dataset.to_string(), method, task, split_seeds, test_losses, selected_lambdas, mean, std, min, max }
}

/// Loads the configured dataset and runs the protocol.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchOutput> {
    let data = load_dataset(&cfg.dataset, cfg.format)?;
    run_benchmark_on(cfg, &data)
}

fn is_zero_one(task: TaskKind) -> bool {
    matches!(task, TaskKind::Multiclass { .. })
}

/// Plain-text table: one row per dataset and method with mean and standard deviation.
pub fn format_table(results: &[ExperimentResult]) -> String {
    let mut out = String::new();
    let splits = results.first().map(|r| r.test_losses.len()).unwrap_or(0);
    let _ = writeln!(out, "Average test loss over {splits} splits (standard deviation in parentheses)");
    let _ = writeln!(out, "{:<16} {:<8} {:>22}", "dataset", "method", "test loss");
    for r in results {
        let cell = if is_zero_one(r.task) {
            format!("{:.2}% ({:.2})", 100.0 * r.mean, 100.0 * r.std)
        } else {
            format!("{:.4} ({:.4})", r.mean, r.std)
        };
        let _ = writeln!(out, "{:<16} {:<8} {:>22}", r.dataset, r.method.to_string(), cell);
    }
    out
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| M4nError::Config(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| M4nError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Writes `results.jsonl`, `diagnostics.jsonl`, `summary.json` and `summary.txt` into `dir`.
pub fn write_outputs(out: &BenchOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| M4nError::Io { path: dir.display().to_string(), message: e.to_string() })?;
    write_file(&dir.join("results.jsonl"), &to_jsonl(&out.runs)?)?;
    write_file(&dir.join("diagnostics.jsonl"), &to_jsonl(&out.diagnostics)?)?;
    let summary = serde_json::to_string_pretty(&out.summary).map_err(|e| M4nError::Config(e.to_string()))?;
    write_file(&dir.join("summary.json"), &(summary + "\n"))?;
    write_file(&dir.join("summary.txt"), &format_table(&out.summary.results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_proportions() {
        let (a, b, c) = split_indices(150, 3);
        assert_eq!((a.len(), b.len(), c.len()), (90, 30, 30));
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort_unstable();
        assert_eq!(all, (0..150).collect::<Vec<_>>());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = BenchConfig::from_toml("dataset = \"x.csv\"\nlambda = 0.1\n").unwrap_err();
        assert!(matches!(err, M4nError::Config(_)));
    }

    #[test]
    fn gamma_parses() {
        let cfg = BenchConfig::from_toml("dataset = \"x.csv\"\nkernel_gamma = 0.5\n").unwrap();
        assert_eq!(cfg.kernel_gamma, KernelGamma::Fixed(0.5));
        let cfg = BenchConfig::from_toml("dataset = \"x.csv\"\nkernel_gamma = \"median\"\n").unwrap();
        assert_eq!(cfg.kernel_gamma, KernelGamma::Median);
    }
}
