//! Python bindings. Labels cross the boundary 0-based: an `int` for class tasks and a list of
//! ints for sequences and permutations.

use m4n::calibration::{self, SearchBudget};
use m4n::oracle::{self, SpmpOptions};
use m4n::projection::{self, SinkhornOptions};
use m4n::trainer::{self, Method, OracleBudget, TrainConfig};
use m4n::{Dataset, KernelSpec, Label, PolytopeState, SynthKind, TaskKind, TaskSpec};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyList, PyString};
use serde_json::Value;

create_exception!(pym4n, M4nError, PyException, "Error raised by the max-min margin core.");

fn err(e: m4n::M4nError) -> PyErr {
    M4nError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => PyFloat::new(py, n.as_f64().unwrap_or(f64::NAN)).into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for x in items {
                list.append(to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(value).map_err(json_err)?)
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    if obj.is_none() {
        return Ok(Value::Null);
    }
    if let Ok(b) = obj.cast::<PyBool>() {
        return Ok(Value::Bool(b.is_true()));
    }
    if let Ok(i) = obj.extract::<i64>() {
        return Ok(Value::from(i));
    }
    if let Ok(f) = obj.extract::<f64>() {
        return Ok(Value::from(f));
    }
    if let Ok(s) = obj.extract::<String>() {
        return Ok(Value::String(s));
    }
    if let Ok(items) = obj.extract::<Vec<Bound<'_, PyAny>>>() {
        return items.iter().map(from_py).collect::<PyResult<Vec<_>>>().map(Value::Array);
    }
    Err(PyValueError::new_err(format!("unsupported value {obj}")))
}

fn label_to_py<'py>(py: Python<'py>, y: &Label) -> PyResult<Bound<'py, PyAny>> {
    match y {
        Label::Class(c) => Ok(c.into_pyobject(py)?.into_any()),
        Label::Sequence(s) | Label::Permutation(s) => Ok(PyList::new(py, s)?.into_any()),
    }
}

fn label_from_py(kind: TaskKind, obj: &Bound<'_, PyAny>) -> PyResult<Label> {
    Ok(match kind {
        TaskKind::Multiclass { .. } | TaskKind::Ordinal { .. } => Label::Class(obj.extract()?),
        TaskKind::Chain { .. } => Label::Sequence(obj.extract()?),
        TaskKind::Ranking { .. } => Label::Permutation(obj.extract()?),
    })
}

fn labels_from_py(kind: TaskKind, obj: &Bound<'_, PyAny>) -> PyResult<Vec<Label>> {
    obj.extract::<Vec<Bound<'_, PyAny>>>()?.iter().map(|y| label_from_py(kind, y)).collect()
}

/// Output space, loss decomposition and decoding for one task.
#[pyclass(name = "Task", module = "pym4n", frozen)]
struct PyTask {
    inner: TaskSpec,
}

#[pymethods]
impl PyTask {
    #[staticmethod]
    fn multiclass(k: usize) -> PyResult<Self> {
        TaskSpec::multiclass(k).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn binary() -> Self {
        Self { inner: TaskSpec::binary() }
    }

    #[staticmethod]
    fn ordinal(k: usize) -> PyResult<Self> {
        TaskSpec::ordinal(k).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn chain(parts: usize, states: usize) -> PyResult<Self> {
        TaskSpec::chain(parts, states).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn ranking(items: usize) -> PyResult<Self> {
        TaskSpec::ranking(items).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn kind<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.inner.kind())
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    #[getter]
    fn offset(&self) -> f64 {
        self.inner.offset()
    }

    /// Dense loss matrix `A` (row-major nested lists).
    fn loss_matrix(&self) -> Vec<Vec<f64>> {
        let k = self.inner.embed_dim();
        self.inner.matrix().to_dense().chunks(k).map(|r| r.to_vec()).collect()
    }

    fn embed(&self, label: &Bound<'_, PyAny>) -> PyResult<Vec<f64>> {
        self.inner.embed(&label_from_py(self.inner.kind(), label)?).map_err(err)
    }

    fn loss(&self, y: &Bound<'_, PyAny>, z: &Bound<'_, PyAny>) -> PyResult<f64> {
        let kind = self.inner.kind();
        self.inner.loss_eval(&label_from_py(kind, y)?, &label_from_py(kind, z)?).map_err(err)
    }

    /// `argmax_y phi(y)^T v`.
    fn decode<'py>(&self, py: Python<'py>, v: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        label_to_py(py, &self.inner.decode(&v).map_err(err)?)
    }

    /// `(min_y phi(y)^T A mu, argmin)` for a point of the marginal polytope.
    fn bayes_risk<'py>(&self, py: Python<'py>, mu: Vec<f64>) -> PyResult<(f64, Bound<'py, PyAny>)> {
        let state = PolytopeState::new(self.inner.layout(), mu).map_err(err)?;
        let (value, label) = self.inner.bayes_risk(&state).map_err(err)?;
        Ok((value, label_to_py(py, &label)?))
    }

    fn enumerate_labels<'py>(&self, py: Python<'py>, limit: usize) -> PyResult<Vec<Bound<'py, PyAny>>> {
        self.inner.enumerate_labels(limit).map_err(err)?.iter().map(|y| label_to_py(py, y)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Task({})", self.inner.layout().describe())
    }
}

/// Averaged saddle point of the max-min oracle with its certified gap.
#[pyclass(name = "OracleResult", module = "pym4n", frozen, get_all)]
struct PyOracleResult {
    mu_bar: Vec<f64>,
    nu_bar: Vec<f64>,
    gap: f64,
    iterations: usize,
    saddle_value: f64,
    upper_value: f64,
    lower_value: f64,
}

#[pyfunction]
#[pyo3(signature = (task, v, iterations = 20, eta = None))]
fn spmp_solve(task: &PyTask, v: Vec<f64>, iterations: usize, eta: Option<f64>) -> PyResult<PyOracleResult> {
    let opts = SpmpOptions { eta, ..SpmpOptions::with_iterations(iterations) };
    let r = oracle::spmp_solve(&v, &task.inner, None, &opts).map_err(err)?;
    Ok(PyOracleResult {
        mu_bar: r.mu_bar.into_values(),
        nu_bar: r.nu_bar.into_values(),
        gap: r.gap,
        iterations: r.iterations,
        saddle_value: r.saddle_value,
        upper_value: r.upper_value,
        lower_value: r.lower_value,
    })
}

/// `max_mu l(mu) + v^T mu` by linear programming (class tasks only).
#[pyfunction]
fn partition_function(task: &PyTask, v: Vec<f64>) -> PyResult<f64> {
    oracle::exact_partition_function(&task.inner, &v).map_err(err)
}

#[pyfunction]
fn certified_gap(task: &PyTask, mu: Vec<f64>, nu: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    let layout = task.inner.layout();
    let mu = PolytopeState::new(layout.clone(), mu).map_err(err)?;
    let nu = PolytopeState::new(layout, nu).map_err(err)?;
    oracle::certified_gap(&mu, &nu, &v, &task.inner).map_err(err)
}

/// Entropic (softmax) projection `argmax_mu <eta grad, mu> - KL(mu | mu_prev)` on the simplex.
#[pyfunction]
fn project_simplex(mu_prev: Vec<f64>, grad: Vec<f64>, eta: f64) -> PyResult<Vec<f64>> {
    projection::project_simplex_entropic(&mu_prev, &grad, eta).map_err(err)
}

/// Sinkhorn projection onto doubly stochastic matrices (flattened row-major).
#[pyfunction]
#[pyo3(signature = (mu_prev, grad, eta, tol = 1e-9, max_iter = 10_000))]
fn sinkhorn(mu_prev: Vec<f64>, grad: Vec<f64>, eta: f64, tol: f64, max_iter: usize) -> PyResult<Vec<f64>> {
    let items = (mu_prev.len() as f64).sqrt().round() as usize;
    let prev = PolytopeState::new(m4n::Layout::Birkhoff { items }, mu_prev).map_err(err)?;
    let opts = SinkhornOptions { tol, max_iter, accept_tol: 10.0 * tol };
    projection::project_birkhoff_sinkhorn(&prev, &grad, eta, opts).map(|s| s.into_values()).map_err(err)
}

/// Trained kernel expansion.
#[pyclass(name = "Model", module = "pym4n", frozen)]
struct PyModel {
    inner: trainer::DualModel,
    report: trainer::TrainReport,
}

#[pymethods]
impl PyModel {
    fn predict<'py>(&self, py: Python<'py>, x: Vec<Vec<f64>>) -> PyResult<Vec<Bound<'py, PyAny>>> {
        let labels = py.detach(|| self.inner.predict_batch(&x)).map_err(err)?;
        labels.iter().map(|y| label_to_py(py, y)).collect()
    }

    fn scores(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.scores(&x).map_err(err)
    }

    /// Mean task loss on `(x, y)`.
    fn evaluate(&self, x: Vec<Vec<f64>>, y: &Bound<'_, PyAny>) -> PyResult<f64> {
        let data = Dataset::new(x, labels_from_py(self.inner.task().kind(), y)?).map_err(err)?;
        self.inner.evaluate(&data).map_err(err)
    }

    /// Per-pass training records.
    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.report.passes)
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method().to_string()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }
}

#[pyfunction]
#[pyo3(signature = (
    task, x, y, *, method = "m4n", lam = 0.1, passes = 30, oracle = "fixed", spmp_iters = 20,
    warm_start = true, kernel_gamma = None, seed = 0, track_gap = true
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    task: &PyTask,
    x: Vec<Vec<f64>>,
    y: &Bound<'_, PyAny>,
    method: &str,
    lam: f64,
    passes: usize,
    oracle: &str,
    spmp_iters: usize,
    warm_start: bool,
    kernel_gamma: Option<f64>,
    seed: u64,
    track_gap: bool,
) -> PyResult<PyModel> {
    let data = Dataset::new(x, labels_from_py(task.inner.kind(), y)?).map_err(err)?;
    let method: Method = method.parse().map_err(err)?;
    let oracle = match oracle {
        "fixed" => OracleBudget::Fixed { iterations: spmp_iters },
        "schedule" => OracleBudget::Schedule { max_iters: spmp_iters },
        "exact" => OracleBudget::Exact,
        other => return Err(PyValueError::new_err(format!("unknown oracle '{other}'"))),
    };
    let gamma = match kernel_gamma {
        Some(g) => g,
        None => m4n::median_heuristic(&data.inputs, seed).map_err(err)?,
    };
    let cfg = TrainConfig {
        passes,
        lambda: lam,
        oracle,
        warm_start,
        seed,
        method,
        kernel: KernelSpec::Gaussian { gamma },
        track_gap,
        ..TrainConfig::default()
    };
    let task = task.inner.clone();
    let (inner, report) = py.detach(|| trainer::train(&data, &task, &cfg)).map_err(err)?;
    Ok(PyModel { inner, report })
}

/// Synthetic data: returns `(x, y, bayes_labels, bayes_error)`. `kind` is one of `blobs`,
/// `flat_noise`, `ordinal`, `hmm`, `rankings`; generator parameters go in keyword arguments.
#[pyfunction]
#[pyo3(signature = (kind, seed = 0, **params))]
fn synth<'py>(py: Python<'py>, kind: &str, seed: u64, params: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = serde_json::Map::new();
    spec.insert("kind".into(), Value::String(kind.into()));
    if let Some(p) = params {
        for (k, v) in p.iter() {
            spec.insert(k.extract()?, from_py(&v)?);
        }
    }
    let kind: SynthKind = serde_json::from_value(Value::Object(spec)).map_err(json_err)?;
    let out = m4n::synth_generate(&kind, seed).map_err(err)?;
    let labels: Vec<_> = out.dataset.labels.iter().map(|y| label_to_py(py, y)).collect::<PyResult<_>>()?;
    let bayes: Vec<_> = out.bayes.iter().map(|y| label_to_py(py, y)).collect::<PyResult<_>>()?;
    let tuple = (out.dataset.inputs, labels, bayes, out.bayes_error).into_pyobject(py)?;
    Ok(tuple.into_any())
}

#[pyfunction]
fn constant_c(task: &PyTask) -> PyResult<f64> {
    calibration::constant_c(&task.inner).map_err(err)
}

#[pyfunction]
fn ranking_d_bound<'py>(py: Python<'py>, items: usize) -> PyResult<Bound<'py, PyAny>> {
    serialize(py, &calibration::ranking_d_bound(items).map_err(err)?)
}

/// Randomized search for the calibration function on a grid of epsilons.
#[pyfunction]
#[pyo3(signature = (task, eps, samples = 20_000, refine_steps = 500, seed = 0))]
fn zeta_bruteforce<'py>(py: Python<'py>, task: &PyTask, eps: Vec<f64>, samples: usize, refine_steps: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let budget = SearchBudget { samples, refine_steps, seed, ..SearchBudget::default() };
    let task = task.inner.clone();
    let est = py.detach(|| calibration::zeta_bruteforce(&task, &eps, &budget)).map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("epsilons", est.epsilons)?;
    dict.set_item("zeta", est.zeta_lower)?;
    dict.set_item("constant_c", est.constant_c)?;
    dict.set_item("min_ratio", est.min_ratio.map(|(r, _)| r))?;
    dict.set_item("samples_evaluated", est.samples_evaluated)?;
    Ok(dict.into_any())
}

/// Runs the split / lambda-grid protocol from a TOML config file; returns the summary.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir = None))]
fn run_benchmark<'py>(py: Python<'py>, config_path: std::path::PathBuf, out_dir: Option<std::path::PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = m4n::BenchConfig::load(&config_path).map_err(err)?;
    let out = py.detach(|| m4n::run_benchmark(&cfg)).map_err(err)?;
    if let Some(dir) = out_dir {
        m4n::bench::write_outputs(&out, &dir).map_err(err)?;
    }
    serialize(py, &out.summary)
}

#[pymodule]
fn pym4n(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("M4nError", m.py().get_type::<M4nError>())?;
    m.add_class::<PyTask>()?;
    m.add_class::<PyOracleResult>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(spmp_solve, m)?)?;
    m.add_function(wrap_pyfunction!(partition_function, m)?)?;
    m.add_function(wrap_pyfunction!(certified_gap, m)?)?;
    m.add_function(wrap_pyfunction!(project_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(constant_c, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_d_bound, m)?)?;
    m.add_function(wrap_pyfunction!(zeta_bruteforce, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    Ok(())
}
