use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use m4n::bench::{self, BenchConfig, KernelGamma, OracleKind};
use m4n::calibration::{self, SearchBudget};
use m4n::data::{self, DataFormat, Standardizer};
use m4n::trainer::{self, Method, OracleBudget, TrainConfig};
use m4n::{KernelSpec, M4nError, SynthKind, TaskKind, TaskSpec};
use serde_json::json;

#[derive(Parser)]
#[command(name = "m4n", version, about = "Max-min margin structured prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on a dataset file.
    Train(TrainArgs),
    /// Run the split / lambda-grid protocol from a TOML config.
    Bench(BenchArgs),
    /// Generate a synthetic dataset and its Bayes predictor.
    Synth(SynthArgs),
    /// Brute-force calibration constants on a small task.
    Calib(CalibArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Binary,
    Multiclass,
    Ordinal,
    Chain,
    Ranking,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        s == Switch::On
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OracleArg {
    Fixed,
    Schedule,
    Exact,
}

impl From<OracleArg> for OracleKind {
    fn from(o: OracleArg) -> Self {
        match o {
            OracleArg::Fixed => OracleKind::Fixed,
            OracleArg::Schedule => OracleKind::Schedule,
            OracleArg::Exact => OracleKind::Exact,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    M4n,
    M3n,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::M4n => Method::M4n,
            MethodArg::M3n => Method::M3n,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training data file.
    #[arg(long)]
    data: PathBuf,
    /// Optional held-out file in the same format.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "multiclass")]
    task: TaskArg,
    /// Number of classes; inferred from the labels when absent.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_enum, default_value = "m4n")]
    method: MethodArg,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 30)]
    passes: usize,
    #[arg(long, value_enum, default_value = "fixed")]
    oracle: OracleArg,
    #[arg(long, default_value_t = 20)]
    spmp_iters: usize,
    #[arg(long, value_enum, default_value = "on")]
    warm_start: Switch,
    /// `median` or a positive width.
    #[arg(long, default_value = "median")]
    kernel_gamma: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "on")]
    standardize: Switch,
    /// Store wall-clock times (makes the output non-reproducible).
    #[arg(long)]
    record_timing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML experiment config; the flags below override its entries.
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',')]
    method: Option<Vec<MethodArg>>,
    /// Single lambda instead of a grid.
    #[arg(long, conflicts_with = "lambda_grid")]
    lambda: Option<f64>,
    /// Comma-separated lambda values.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long, value_enum)]
    oracle: Option<OracleArg>,
    #[arg(long)]
    spmp_iters: Option<usize>,
    #[arg(long, value_enum)]
    warm_start: Option<Switch>,
    #[arg(long)]
    kernel_gamma: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    record_timing: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthKindArg {
    Blobs,
    FlatNoise,
    Ordinal,
    Hmm,
    Rankings,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(value_enum)]
    kind: SynthKindArg,
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// Classes (blobs, ordinal).
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    /// Class probabilities for flat-noise data.
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.35,0.25")]
    probs: Vec<f64>,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    parts: usize,
    #[arg(long, default_value_t = 3)]
    states: usize,
    #[arg(long, default_value_t = 0.8)]
    stay: f64,
    #[arg(long, default_value_t = 4)]
    items: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset file; the Bayes predictor goes next to it as `<stem>.bayes.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibArgs {
    #[arg(long, value_enum, default_value = "multiclass")]
    task: TaskArg,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    parts: usize,
    #[arg(long, default_value_t = 2)]
    states: usize,
    #[arg(long, default_value_t = 3)]
    items: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
    eps: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 2000)]
    refine_steps: usize,
    #[arg(long, default_value_t = 5000)]
    spmp_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the surrogate-space search and only compute the constants.
    #[arg(long)]
    constants_only: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Input(M4nError),
    Training(M4nError),
}

impl From<M4nError> for Failure {
    fn from(e: M4nError) -> Self {
        match e {
            M4nError::Parse { .. }
            | M4nError::Config(_)
            | M4nError::Io { .. }
            | M4nError::InvalidLabel(_)
            | M4nError::InvalidTask(_)
            | M4nError::InvalidArgument(_)
            | M4nError::LayoutMismatch { .. }
            | M4nError::DimensionMismatch { .. } => Failure::Input(e),
            other => Failure::Training(other),
        }
    }
}

type Outcome = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> M4nError {
    M4nError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), M4nError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| M4nError::Config(e.to_string()))?;
    bench::write_file(path, &(text + "\n"))
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<serde_json::Value, M4nError> {
    serde_json::to_value(v).map_err(|e| M4nError::Config(e.to_string()))
}

fn format_for(task: TaskArg) -> DataFormat {
    match task {
        TaskArg::Binary | TaskArg::Multiclass | TaskArg::Ordinal => DataFormat::Tabular,
        TaskArg::Chain => DataFormat::Sequence,
        TaskArg::Ranking => DataFormat::Ranking,
    }
}

fn build_task(task: TaskArg, classes: usize, parts: usize, states: usize, items: usize) -> Result<TaskSpec, M4nError> {
    match task {
        TaskArg::Binary => Ok(TaskSpec::binary()),
        TaskArg::Multiclass => TaskSpec::multiclass(classes),
        TaskArg::Ordinal => TaskSpec::ordinal(classes),
        TaskArg::Chain => TaskSpec::chain(parts, states),
        TaskArg::Ranking => TaskSpec::ranking(items),
    }
}

fn run_train(a: TrainArgs) -> Outcome {
    let format = format_for(a.task);
    let mut train_set = data::load_dataset(&a.data, format)?;
    let mut test_set = a.test.as_deref().map(|p| data::load_dataset(p, format)).transpose()?;
    let task = match (a.task, a.classes) {
        (TaskArg::Binary, _) => TaskSpec::binary(),
        (TaskArg::Multiclass, Some(k)) => TaskSpec::multiclass(k)?,
        (TaskArg::Ordinal, Some(k)) => TaskSpec::ordinal(k)?,
        _ => train_set.infer_task(format, a.task == TaskArg::Ordinal)?,
    };
    if a.standardize.into() {
        let st = Standardizer::fit(&train_set);
        train_set = st.apply(&train_set);
        test_set = test_set.map(|t| st.apply(&t));
    }
    let gamma = match a.kernel_gamma.parse::<KernelGamma>()? {
        KernelGamma::Median => m4n::median_heuristic(&train_set.inputs, a.seed)?,
        KernelGamma::Fixed(g) => g,
    };
    let oracle = match a.oracle {
        OracleArg::Fixed => OracleBudget::Fixed { iterations: a.spmp_iters },
        OracleArg::Schedule => OracleBudget::Schedule { max_iters: a.spmp_iters },
        OracleArg::Exact => OracleBudget::Exact,
    };
    let cfg = TrainConfig {
        passes: a.passes,
        lambda: a.lambda,
        oracle,
        warm_start: a.warm_start.into(),
        seed: a.seed,
        method: a.method.into(),
        kernel: KernelSpec::Gaussian { gamma },
        record_timing: a.record_timing,
        ..TrainConfig::default()
    };
    let (model, mut report) = trainer::train(&train_set, &task, &cfg)?;
    let train_loss = model.evaluate(&train_set)?;
    if let Some(t) = &test_set {
        report.test_loss = Some(model.evaluate(t)?);
    }
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let summary = json!({
        "data": a.data.display().to_string(),
        "data_hash": train_set.content_hash(),
        "task": to_value(&task.kind())?,
        "config": to_value(&cfg)?,
        "train_loss": train_loss,
        "test_loss": report.test_loss,
        "final_pass": to_value(report.last())?,
    });
    write_json(&a.out.join("report.json"), &summary)?;
    bench::write_file(&a.out.join("diagnostics.jsonl"), &bench::to_jsonl(&report.passes)?)?;
    write_json(&a.out.join("model.json"), &to_value(&model)?)?;
    let last = report.last();
    println!(
        "{} on {}: train loss {:.4}{}, dual gap {}",
        cfg.method,
        a.data.display(),
        train_loss,
        report.test_loss.map(|l| format!(", test loss {l:.4}")).unwrap_or_default(),
        last.dual_gap.map(|g| format!("{g:.3e}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn run_bench(a: BenchArgs) -> Outcome {
    let mut cfg = BenchConfig::load(&a.config)?;
    if let Some(m) = a.method {
        cfg.methods = m.into_iter().map(Method::from).collect();
    }
    if let Some(l) = a.lambda {
        cfg.lambda_grid = Some(vec![l]);
    }
    if let Some(g) = a.lambda_grid {
        cfg.lambda_grid = Some(g);
    }
    if let Some(p) = a.passes {
        cfg.passes = p;
    }
    if let Some(o) = a.oracle {
        cfg.oracle = o.into();
    }
    if let Some(k) = a.spmp_iters {
        cfg.spmp_iters = k;
    }
    if let Some(w) = a.warm_start {
        cfg.warm_start = w.into();
    }
    if let Some(g) = a.kernel_gamma {
        cfg.kernel_gamma = g.parse()?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.splits {
        cfg.splits = s;
    }
    cfg.record_timing |= a.record_timing;
    cfg.validate()?;
    let out = bench::run_benchmark(&cfg)?;
    bench::write_outputs(&out, &a.out)?;
    print!("{}", bench::format_table(&out.summary.results));
    Ok(())
}

fn run_synth(a: SynthArgs) -> Outcome {
    let kind = match a.kind {
        SynthKindArg::Blobs => SynthKind::Blobs { k: a.classes, n: a.n, separation: a.separation, dim: a.dim },
        SynthKindArg::FlatNoise => SynthKind::FlatNoise { probs: a.probs.clone(), n: a.n, dim: a.dim },
        SynthKindArg::Ordinal => SynthKind::Ordinal { k: a.classes, n: a.n, dim: a.dim, noise: a.noise },
        SynthKindArg::Hmm => SynthKind::Hmm { parts: a.parts, states: a.states, n: a.n, stay: a.stay, separation: a.separation },
        SynthKindArg::Rankings => SynthKind::Rankings { items: a.items, n: a.n, dim: a.dim, noise: a.noise },
    };
    let out = m4n::synth_generate(&kind, a.seed)?;
    let format = DataFormat::for_task(out.task.kind());
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    bench::write_file(&a.out, &data::write_dataset(&out.dataset, format))?;
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "synth".into());
    let bayes_path = a.out.with_file_name(format!("{stem}.bayes.json"));
    let bayes = json!({
        "generator": to_value(&kind)?,
        "seed": a.seed,
        "task": to_value(&out.task.kind())?,
        "bayes_error": out.bayes_error,
        "bayes_labels": out.bayes.iter().map(|y| y.to_string()).collect::<Vec<_>>(),
    });
    write_json(&bayes_path, &bayes)?;
    println!("wrote {} examples to {} (Bayes predictor in {})", out.dataset.len(), a.out.display(), bayes_path.display());
    Ok(())
}

fn run_calib(a: CalibArgs) -> Outcome {
    let task = build_task(a.task, a.classes, a.parts, a.states, a.items)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let c = calibration::constant_c(&task)?;
    let mut report = json!({
        "task": to_value(&task.kind())?,
        "constant_c": if c.is_finite() { json!(c) } else { json!("inf") },
    });
    if let TaskKind::Ranking { items } = task.kind() {
        report["birkhoff"] = to_value(&calibration::ranking_d_bound(items)?)?;
    }
    if !a.constants_only {
        let budget = SearchBudget { samples: a.samples, refine_steps: a.refine_steps, spmp_iters: a.spmp_iters, seed: a.seed, ..SearchBudget::default() };
        let est = calibration::zeta_bruteforce(&task, &a.eps, &budget)?;
        for (e, z) in est.epsilons.iter().zip(&est.zeta_lower) {
            println!("eps {e:.3}: zeta <= {z:.5} (zeta/eps = {:.4})", z / e);
        }
        report["zeta"] = json!({
            "epsilons": est.epsilons,
            "zeta": est.zeta_lower.iter().map(|z| if z.is_finite() { json!(z) } else { json!("inf") }).collect::<Vec<_>>(),
            "witnesses": to_value(&est.witnesses)?,
            "min_ratio": est.min_ratio.as_ref().map(|(r, _)| *r),
            "samples_evaluated": est.samples_evaluated,
            "constant_d_bound": if est.constant_d_bound.is_finite() { json!(est.constant_d_bound) } else { json!("inf") },
        });
    }
    write_json(&a.out.join("calibration.json"), &report)?;
    println!("constant C = {c}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Bench(a) => run_bench(a),
        Command::Synth(a) => run_synth(a),
        Command::Calib(a) => run_calib(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Training(e)) => {
            eprintln!("training failed: {e}");
            ExitCode::from(3)
        }
    }
}

