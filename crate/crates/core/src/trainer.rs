//! Generalized block-coordinate Frank-Wolfe on the kernelized dual, and the max-margin
//! baseline that shares its skeleton.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{M4nError, Result};
use crate::kernel::{self, KernelSpec};
use crate::loss::{Label, Layout, PolytopeState, TaskKind, TaskSpec};
use crate::oracle::{exact_simplex_oracle, spmp_solve, SpmpOptions, WarmStartCache};
use crate::projection::SinkhornOptions;

/// Training sets up to this size get a precomputed Gram matrix.
pub const GRAM_CACHE_LIMIT: usize = 8000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Max-min margin (consistent surrogate).
    M4n,
    /// Max-margin baseline with loss-augmented decoding.
    M3n,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::M4n => "m4n",
            Method::M3n => "m3n",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = M4nError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m4n" => Ok(Method::M4n),
            "m3n" => Ok(Method::M3n),
            other => Err(M4nError::InvalidArgument(format!("unknown method '{other}', expected m4n or m3n"))),
        }
    }
}

/// How much work each max-min oracle call gets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OracleBudget {
    /// Constant number of saddle-point rounds.
    Fixed { iterations: usize },
    /// Stop once the certified gap is below the step-dependent error schedule
    /// `delta * gamma_t * diam^2 * k(x_i, x_i) / (2 lambda n)`, capped at `max_iters` rounds.
    Schedule { max_iters: usize },
    /// Exact linear-programming oracle (simplex tasks only).
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub passes: usize,
    pub lambda: f64,
    pub oracle: OracleBudget,
    /// Saddle-point step override.
    pub eta: Option<f64>,
    pub warm_start: bool,
    pub seed: u64,
    /// Scale of the approximate-oracle error schedule.
    pub oracle_error_delta: f64,
    pub method: Method,
    /// Keep the weighted average of iterates and predict with it.
    pub averaging: bool,
    pub kernel: KernelSpec,
    /// Compute dual gap and primal objective after every pass.
    pub track_gap: bool,
    /// Saddle-point rounds used to certify `Omega*` in the dual gap for non-simplex tasks.
    pub gap_oracle_iters: usize,
    pub record_timing: bool,
    pub sinkhorn: SinkhornOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            passes: 50,
            lambda: 0.1,
            oracle: OracleBudget::Fixed { iterations: 20 },
            eta: None,
            warm_start: true,
            seed: 0,
            oracle_error_delta: 1.0,
            method: Method::M4n,
            averaging: false,
            kernel: KernelSpec::Gaussian { gamma: 1.0 },
            track_gap: true,
            gap_oracle_iters: 200,
            record_timing: false,
            sinkhorn: SinkhornOptions::relaxed(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(M4nError::InvalidArgument(format!("lambda must be positive, got {}", self.lambda)));
        }
        match self.oracle {
            OracleBudget::Fixed { iterations: 0 } | OracleBudget::Schedule { max_iters: 0 } => {
                return Err(M4nError::InvalidArgument("oracle budget must allow at least one iteration".into()))
            }
            _ => {}
        }
        if !(self.oracle_error_delta > 0.0) {
            return Err(M4nError::InvalidArgument("oracle_error_delta must be positive".into()));
        }
        self.kernel.validate()
    }
}

/// `gamma_t = 2n / (t + 2n)`.
pub fn step_size(t: usize, n: usize) -> f64 {
    2.0 * n as f64 / (t as f64 + 2.0 * n as f64)
}

/// Squared Euclidean diameter of a task's marginal polytope.
pub fn polytope_diameter_sq(task: &TaskSpec) -> f64 {
    match task.kind() {
        TaskKind::Multiclass { .. } | TaskKind::Ordinal { .. } => 2.0,
        TaskKind::Chain { parts, .. } => 2.0 * (2 * parts - 1) as f64,
        TaskKind::Ranking { items } => 2.0 * items as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub pass: usize,
    pub iterations: usize,
    pub dual_objective: f64,
    pub primal_objective: Option<f64>,
    pub dual_gap: Option<f64>,
    /// Mean certified gap of the oracle calls made during the pass.
    pub mean_oracle_gap: f64,
    pub mean_oracle_iterations: f64,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub seed: u64,
    pub lambda: f64,
    pub n: usize,
    /// Pass 0 is the initial state.
    pub passes: Vec<PassRecord>,
    pub test_loss: Option<f64>,
}

impl TrainReport {
    pub fn last(&self) -> &PassRecord {
        self.passes.last().expect("report has the initial record")
    }
}

/// Dual variables and the induced kernel expansion `g(x) = sum_i k(x, x_i) c_i`
/// with `c_i = (phi(y_i) - mu_i) / (lambda n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualModel {
    task: TaskSpec,
    method: Method,
    lambda: f64,
    kernel: KernelSpec,
    inputs: Vec<Vec<f64>>,
    labels: Vec<Label>,
    phi: Vec<Vec<f64>>,
    dual_mu: Vec<PolytopeState>,
    /// Row-major `n x k`.
    coeffs: Vec<f64>,
    averaged: Option<Vec<f64>>,
}

impl DualModel {
    /// Model at `mu_i = phi(y_i)`, i.e. `w = 0`.
    pub fn new(data: &Dataset, task: &TaskSpec, lambda: f64, kernel: KernelSpec, method: Method) -> Result<Self> {
        data.validate(task)?;
        let phi = data.labels.iter().map(|y| task.embed(y)).collect::<Result<Vec<_>>>()?;
        let dual_mu = phi.iter().map(|p| PolytopeState::new(task.layout(), p.clone())).collect::<Result<Vec<_>>>()?;
        let k = task.embed_dim();
        Ok(Self {
            task: task.clone(),
            method,
            lambda,
            kernel,
            inputs: data.inputs.clone(),
            labels: data.labels.clone(),
            phi,
            dual_mu,
            coeffs: vec![0.0; data.len() * k],
            averaged: None,
        })
    }

    pub fn n(&self) -> usize {
        self.inputs.len()
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kernel(&self) -> KernelSpec {
        self.kernel
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn dual_mu(&self) -> &[PolytopeState] {
        &self.dual_mu
    }

    /// Row-major `n x k` coefficients of the current iterate.
    pub fn kernel_coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn averaged_coeffs(&self) -> Option<&[f64]> {
        self.averaged.as_deref()
    }

    /// Coefficients used for prediction (the average when averaging is on).
    pub fn prediction_coeffs(&self) -> &[f64] {
        self.averaged.as_deref().unwrap_or(&self.coeffs)
    }

    fn coeff_row_from(&self, i: usize, mu: &[f64]) -> Vec<f64> {
        let scale = 1.0 / (self.lambda * self.n() as f64);
        self.phi[i].iter().zip(mu).map(|(p, m)| (p - m) * scale).collect()
    }

    /// Coefficients rebuilt from the dual variables.
    pub fn recompute_coeffs(&self) -> Vec<f64> {
        (0..self.n()).flat_map(|i| self.coeff_row_from(i, self.dual_mu[i].values())).collect()
    }

    /// Largest deviation between maintained and recomputed coefficients.
    pub fn consistency_error(&self) -> f64 {
        self.recompute_coeffs().iter().zip(&self.coeffs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Replaces one block's dual variable, keeping coefficients consistent.
    pub fn set_dual(&mut self, i: usize, mu: PolytopeState) -> Result<()> {
        mu.expect_layout(self.task.layout())?;
        let k = self.task.embed_dim();
        let row = self.coeff_row_from(i, mu.values());
        self.coeffs[i * k..(i + 1) * k].copy_from_slice(&row);
        self.dual_mu[i] = mu;
        Ok(())
    }

    fn expand(&self, kernel_row: &[f64], coeffs: &[f64]) -> Vec<f64> {
        let k = self.task.embed_dim();
        let mut out = vec![0.0; k];
        for (j, kv) in kernel_row.iter().enumerate() {
            if *kv != 0.0 {
                for (o, c) in out.iter_mut().zip(&coeffs[j * k..(j + 1) * k]) {
                    *o += kv * c;
                }
            }
        }
        out
    }

    /// `g(x)` with the prediction coefficients.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.inputs.first().map(|v| v.len()).unwrap_or(0);
        if x.len() != d {
            return Err(M4nError::DimensionMismatch { expected: d, got: x.len() });
        }
        let row: Vec<f64> = self.inputs.iter().map(|xi| self.kernel.eval(x, xi)).collect();
        Ok(self.expand(&row, self.prediction_coeffs()))
    }

    /// `decode(g(x))`.
    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        self.task.decode(&self.scores(x)?)
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Label>> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }

    /// Mean task loss (offset included) on a labelled set.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        data.validate(&self.task)?;
        if data.is_empty() {
            return Err(M4nError::InvalidArgument("cannot evaluate on an empty set".into()));
        }
        let preds = self.predict_batch(&data.inputs)?;
        let total: f64 = preds
            .iter()
            .zip(&data.labels)
            .map(|(p, y)| self.task.loss_eval(y, p))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .sum();
        Ok(total / data.len() as f64)
    }

    /// `g(x_i)` for every training point with the current (non-averaged) coefficients.
    pub fn training_scores(&self) -> Result<Vec<f64>> {
        let cache = KernelCache::build(&self.inputs, &self.kernel)?;
        Ok(self.training_scores_with(&cache))
    }

    fn training_scores_with(&self, cache: &KernelCache) -> Vec<f64> {
        let n = self.n();
        (0..n).into_par_iter().flat_map_iter(|i| self.expand(&cache.row(i, &self.inputs, &self.kernel), &self.coeffs)).collect()
    }

    /// Block objective `l_i(mu)`: Bayes risk for the max-min surrogate, the linear
    /// `phi(y_i)^T A mu` for the max-margin baseline.
    fn block_value(&self, i: usize, mu: &PolytopeState) -> Result<f64> {
        match self.method {
            Method::M4n => self.task.bayes_risk(mu).map(|(v, _)| v),
            Method::M3n => Ok(self.task.matrix().bilinear(&self.phi[i], mu.values())),
        }
    }

    /// `||w||^2 = sum_i c_i^T g(x_i)`.
    fn norm_sq(&self, scores: &[f64]) -> f64 {
        self.coeffs.iter().zip(scores).map(|(a, b)| a * b).sum()
    }
}

/// Gram rows, precomputed for small training sets.
struct KernelCache {
    gram: Option<Vec<f64>>,
    n: usize,
}

impl KernelCache {
    fn build(inputs: &[Vec<f64>], kernel: &KernelSpec) -> Result<Self> {
        let n = inputs.len();
        let gram = if n <= GRAM_CACHE_LIMIT { Some(kernel::gram(inputs, kernel)?) } else { None };
        if let Some(g) = &gram {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(M4nError::Kernel("non-finite kernel values".into()));
            }
        }
        Ok(Self { gram, n })
    }

    fn row(&self, i: usize, inputs: &[Vec<f64>], kernel: &KernelSpec) -> Vec<f64> {
        match &self.gram {
            Some(g) => g[i * self.n..(i + 1) * self.n].to_vec(),
            None => inputs.iter().map(|x| kernel.eval(&inputs[i], x)).collect(),
        }
    }

    fn diag(&self, i: usize, inputs: &[Vec<f64>], kernel: &KernelSpec) -> f64 {
        match &self.gram {
            Some(g) => g[i * self.n + i],
            None => kernel.eval(&inputs[i], &inputs[i]),
        }
    }
}

/// Objective values of a model at a given set of training scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapSummary {
    pub dual_objective: f64,
    pub primal_objective: f64,
    pub dual_gap: f64,
}

fn dual_objective(model: &DualModel, scores: &[f64]) -> Result<f64> {
    let n = model.n();
    let mut risk = 0.0;
    for i in 0..n {
        risk += model.block_value(i, &model.dual_mu[i])?;
    }
    Ok(risk / n as f64 - 0.5 * model.lambda * model.norm_sq(scores))
}

/// `max_mu l_i(mu) + v^T mu`, exactly where possible and otherwise as a certified upper bound.
fn block_max(model: &DualModel, i: usize, v: &[f64], gap_iters: usize, sinkhorn: SinkhornOptions) -> Result<f64> {
    let task = &model.task;
    match model.method {
        Method::M3n => {
            let y = task.loss_augmented_decode(&model.labels[i], v)?;
            let phi_y = task.embed(&y)?;
            Ok(task.matrix().bilinear(&model.phi[i], &phi_y) + task.score(&y, v))
        }
        Method::M4n => match task.layout() {
            Layout::Simplex { .. } => exact_simplex_oracle(task, v, None).map(|(_, value)| value),
            _ => {
                let opts = SpmpOptions { iterations: gap_iters.max(1), sinkhorn, ..SpmpOptions::default() };
                spmp_solve(v, task, None, &opts).map(|r| r.upper_value)
            }
        },
    }
}

fn summarize(model: &DualModel, scores: &[f64], gap_iters: usize, sinkhorn: SinkhornOptions) -> Result<GapSummary> {
    let n = model.n();
    let k = model.task.embed_dim();
    let per_example: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let v = &scores[i * k..(i + 1) * k];
            let best = block_max(model, i, v, gap_iters, sinkhorn)?;
            let current = model.block_value(i, &model.dual_mu[i])? + model.dual_mu[i].dot(v);
            let surrogate = best - model.task.score(&model.labels[i], v);
            Ok((best - current, surrogate))
        })
        .collect::<Result<Vec<_>>>()?;
    let gap = per_example.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let surrogate = per_example.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let dual = dual_objective(model, scores)?;
    let primal = 0.5 * model.lambda * model.norm_sq(scores) + surrogate;
    Ok(GapSummary { dual_objective: dual, primal_objective: primal, dual_gap: gap })
}

/// Dual gap `(1/n) sum_i [max_mu l_i(mu) + v_i^T mu - l_i(mu_i) - v_i^T mu_i]`, exact for simplex
/// tasks and the max-margin baseline, an upper bound (certified by `gap_iters` saddle rounds)
/// otherwise.
pub fn dual_gap(model: &DualModel, gap_iters: usize) -> Result<GapSummary> {
    let scores = model.training_scores()?;
    summarize(model, &scores, gap_iters, SinkhornOptions::relaxed())
}

/// Block-coordinate Frank-Wolfe with the max-min oracle.
pub fn gbcfw_train(data: &Dataset, task: &TaskSpec, cfg: &TrainConfig) -> Result<(DualModel, TrainReport)> {
    train_with(data, task, cfg, Method::M4n)
}

/// Block-coordinate Frank-Wolfe with loss-augmented decoding.
pub fn m3n_train(data: &Dataset, task: &TaskSpec, cfg: &TrainConfig) -> Result<(DualModel, TrainReport)> {
    train_with(data, task, cfg, Method::M3n)
}

/// Dispatches on `cfg.method`.
pub fn train(data: &Dataset, task: &TaskSpec, cfg: &TrainConfig) -> Result<(DualModel, TrainReport)> {
    train_with(data, task, cfg, cfg.method)
}

struct OracleCall {
    direction: PolytopeState,
    gap: f64,
    iterations: usize,
}

fn train_with(data: &Dataset, task: &TaskSpec, cfg: &TrainConfig, method: Method) -> Result<(DualModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(M4nError::InvalidArgument("training set is empty".into()));
    }
    if method == Method::M4n && cfg.oracle == OracleBudget::Exact && !matches!(task.layout(), Layout::Simplex { .. }) {
        return Err(M4nError::InvalidArgument("the exact oracle is only available for simplex tasks".into()));
    }
    let start = Instant::now();
    let mut model = DualModel::new(data, task, cfg.lambda, cfg.kernel, method)?;
    let cache = KernelCache::build(&model.inputs, &model.kernel)?;
    let n = model.n();
    let k = task.embed_dim();
    let mut scores = vec![0.0; n * k];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut warm = WarmStartCache::new(n);
    let diam2 = polytope_diameter_sq(task);
    if cfg.averaging {
        model.averaged = Some(model.coeffs.clone());
    }

    let wall = |start: &Instant| cfg.record_timing.then(|| start.elapsed().as_secs_f64() * 1e3);
    let record = |model: &DualModel, scores: &[f64], pass: usize, t: usize, gaps: (f64, f64), start: &Instant| -> Result<PassRecord> {
        let (primal, gap) = if cfg.track_gap {
            let s = summarize(model, scores, cfg.gap_oracle_iters, cfg.sinkhorn)?;
            (Some(s.primal_objective), Some(s.dual_gap))
        } else {
            (None, None)
        };
        Ok(PassRecord {
            pass,
            iterations: t,
            dual_objective: dual_objective(model, scores)?,
            primal_objective: primal,
            dual_gap: gap,
            mean_oracle_gap: gaps.0,
            mean_oracle_iterations: gaps.1,
            wall_ms: wall(start),
        })
    };

    let mut passes = vec![record(&model, &scores, 0, 0, (0.0, 0.0), &start)?];
    let mut t = 0usize;
    for pass in 1..=cfg.passes {
        let mut gap_sum = 0.0;
        let mut iter_sum = 0usize;
        for _ in 0..n {
            let i = rng.random_range(0..n);
            let gamma = step_size(t, n);
            let v = scores[i * k..(i + 1) * k].to_vec();
            let call = oracle_call(&model, &mut warm, i, &v, gamma, diam2, &cache, cfg)
                .map_err(|e| M4nError::Training { step: t, example: i, source: Box::new(e) })?;
            gap_sum += call.gap;
            iter_sum += call.iterations;

            let old = model.coeffs[i * k..(i + 1) * k].to_vec();
            let mixed = model.dual_mu[i].mix(&call.direction, gamma)?;
            model.set_dual(i, mixed)?;
            let delta: Vec<f64> = model.coeffs[i * k..(i + 1) * k].iter().zip(&old).map(|(a, b)| a - b).collect();
            let col = cache.row(i, &model.inputs, &model.kernel);
            for (j, kji) in col.iter().enumerate() {
                if *kji != 0.0 {
                    for (s, d) in scores[j * k..(j + 1) * k].iter_mut().zip(&delta) {
                        *s += kji * d;
                    }
                }
            }
            if let Some(avg) = model.averaged.as_mut() {
                let w = 2.0 / (t as f64 + 2.0);
                for (a, c) in avg.iter_mut().zip(&model.coeffs) {
                    *a = (1.0 - w) * *a + w * c;
                }
            }
            t += 1;
        }
        // drop incremental round-off once per pass
        scores = model.training_scores_with(&cache);
        passes.push(record(&model, &scores, pass, t, (gap_sum / n as f64, iter_sum as f64 / n as f64), &start)?);
    }
    let report = TrainReport { method, seed: cfg.seed, lambda: cfg.lambda, n, passes, test_loss: None };
    Ok((model, report))
}

#[allow(clippy::too_many_arguments)]
fn oracle_call(
    model: &DualModel,
    warm: &mut WarmStartCache,
    i: usize,
    v: &[f64],
    gamma: f64,
    diam2: f64,
    cache: &KernelCache,
    cfg: &TrainConfig,
) -> Result<OracleCall> {
    let task = &model.task;
    match model.method {
        Method::M3n => {
            let y = task.loss_augmented_decode(&model.labels[i], v)?;
            Ok(OracleCall { direction: task.vertex_state(&y)?, gap: 0.0, iterations: 0 })
        }
        Method::M4n => {
            let opts = match cfg.oracle {
                OracleBudget::Exact => {
                    let (mu, _) = exact_simplex_oracle(task, v, Some(model.dual_mu[i].values()))?;
                    return Ok(OracleCall { direction: mu, gap: 0.0, iterations: 0 });
                }
                OracleBudget::Fixed { iterations } => {
                    SpmpOptions { iterations, eta: cfg.eta, tolerance: None, sinkhorn: cfg.sinkhorn, ..SpmpOptions::default() }
                }
                OracleBudget::Schedule { max_iters } => {
                    let kii = cache.diag(i, &model.inputs, &model.kernel);
                    let tol = 0.5 * cfg.oracle_error_delta * gamma * diam2 * kii / (cfg.lambda * model.n() as f64);
                    SpmpOptions { iterations: max_iters, eta: cfg.eta, tolerance: Some(tol), sinkhorn: cfg.sinkhorn, ..SpmpOptions::default() }
                }
            };
            let init = cfg.warm_start.then(|| warm.lookup(i, task.layout()));
            let result = spmp_solve(v, task, init, &opts)?;
            if cfg.warm_start {
                warm.store(i, result.mu_last.clone(), result.nu_last.clone());
            }
            Ok(OracleCall { direction: result.mu_bar, gap: result.gap, iterations: result.iterations })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_replaces_block() {
        assert_eq!(step_size(0, 10), 1.0);
        assert!((step_size(10, 10) - 20.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn method_parses() {
        assert_eq!("m3n".parse::<Method>().unwrap(), Method::M3n);
        assert!("svm".parse::<Method>().is_err());
    }
}
