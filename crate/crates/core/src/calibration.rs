//! Brute-force calibration quantities on small tasks: the calibration function
//! `zeta(eps) = inf { ds(v, mu) : dl(d(v), mu) >= eps }`, the constant `C` bounding it below
//! by `eps / C`, and the Birkhoff decomposition behind the ranking constant.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{M4nError, Result};
use crate::loss::{Label, Layout, PolytopeState, TaskKind, TaskSpec};
use crate::oracle::{exact_partition_function, spmp_solve, SpmpOptions};

/// Output spaces above this size are refused.
pub const MAX_LABELS: usize = 24;
/// Embedding dimension above which the surrogate-space search is refused.
pub const MAX_SEARCH_DIM: usize = 6;
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBudget {
    /// Random `(v, mu)` pairs.
    pub samples: usize,
    /// Local perturbation steps around the best witness of each epsilon.
    pub refine_steps: usize,
    /// Saddle-point rounds for `Omega*` on non-simplex tasks.
    pub spmp_iters: usize,
    /// Half-width of the box `v` is drawn from.
    pub v_scale: f64,
    pub seed: u64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self { samples: 100_000, refine_steps: 2000, spmp_iters: 5000, v_scale: 2.0, seed: 0 }
    }
}

/// A feasible pair with its excess losses, re-verifiable with [`excess_risks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub v: Vec<f64>,
    pub mu: Vec<f64>,
    pub decoded: Label,
    pub delta_loss: f64,
    pub delta_surrogate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEstimate {
    pub task: TaskKind,
    pub epsilons: Vec<f64>,
    /// Search estimate of `zeta(eps)`; `+inf` when no feasible pair was found.
    pub zeta_lower: Vec<f64>,
    pub witnesses: Vec<Option<Witness>>,
    pub constant_c: f64,
    pub constant_d_bound: f64,
    pub samples_evaluated: usize,
    /// Smallest `ds / dl` over every evaluated pair with `dl >= min(epsilons)`.
    pub min_ratio: Option<(f64, Witness)>,
}

/// `(dl, ds)` of a pair: excess task risk of decoding `v` under `mu`, and excess surrogate risk
/// `Omega*(v) - v^T mu - l(mu)`. `Omega*` is exact for simplex tasks and a certified upper value
/// otherwise, so `ds` is never underestimated.
pub fn excess_risks(task: &TaskSpec, v: &[f64], mu: &PolytopeState, spmp_iters: usize) -> Result<(f64, f64, Label)> {
    let (bayes, _) = task.bayes_risk(mu)?;
    let decoded = task.decode(v)?;
    let a_mu = task.matrix().apply(mu.values());
    let delta_loss = task.score(&decoded, &a_mu) - bayes;
    let omega = match task.layout() {
        Layout::Simplex { .. } => exact_partition_function(task, v)?,
        _ => spmp_solve(v, task, None, &SpmpOptions::with_iterations(spmp_iters))?.upper_value,
    };
    let delta_surrogate = omega - mu.dot(v) - bayes;
    Ok((delta_loss, delta_surrogate, decoded))
}

fn random_moments(task: &TaskSpec, labels: &[Vec<f64>], rng: &mut ChaCha8Rng) -> PolytopeState {
    let n = labels.len();
    // a mix of sparse and dense supports reaches faces as well as the interior
    let support = rng.random_range(1..=n);
    let mut weights = vec![0.0; n];
    let mut idx: Vec<usize> = (0..n).collect();
    for s in 0..support {
        let j = rng.random_range(s..n);
        idx.swap(s, j);
        weights[idx[s]] = rng.sample::<f64, _>(Exp1);
    }
    if rng.random_bool(0.2) {
        for s in 0..support {
            weights[idx[s]] = 1.0;
        }
    }
    let total: f64 = weights.iter().sum();
    let mut mu = vec![0.0; task.embed_dim()];
    for (w, phi) in weights.iter().zip(labels) {
        for (m, p) in mu.iter_mut().zip(phi) {
            *m += w / total * p;
        }
    }
    PolytopeState::new(task.layout(), mu).expect("convex combination of vertices")
}

fn random_v(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Randomized search for `zeta` on a grid of epsilons, with local refinement.
pub fn zeta_bruteforce(task: &TaskSpec, eps_grid: &[f64], budget: &SearchBudget) -> Result<CalibrationEstimate> {
    if eps_grid.is_empty() || eps_grid.iter().any(|e| !(*e > 0.0)) {
        return Err(M4nError::InvalidArgument("epsilon grid must be non-empty and positive".into()));
    }
    let labels = task.enumerate_labels(MAX_LABELS)?;
    if task.embed_dim() > MAX_SEARCH_DIM {
        return Err(M4nError::InvalidArgument(format!(
            "embedding dimension {} exceeds the search limit {MAX_SEARCH_DIM}",
            task.embed_dim()
        )));
    }
    let vertices = labels.iter().map(|y| task.embed(y)).collect::<Result<Vec<_>>>()?;
    let dim = task.embed_dim();
    let eps_min = eps_grid.iter().cloned().fold(f64::INFINITY, f64::min);

    let evaluate = |v: Vec<f64>, mu: PolytopeState| -> Result<Witness> {
        let (dl, ds, decoded) = excess_risks(task, &v, &mu, budget.spmp_iters)?;
        Ok(Witness { v, mu: mu.into_values(), decoded, delta_loss: dl, delta_surrogate: ds })
    };

    // each chunk has its own seed, so results do not depend on the thread count
    let chunks = budget.samples.div_ceil(CHUNK);
    let per_chunk: Vec<(Vec<Option<Witness>>, Option<Witness>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(budget.seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let count = CHUNK.min(budget.samples - c * CHUNK);
            let mut best: Vec<Option<Witness>> = vec![None; eps_grid.len()];
            let mut worst_ratio: Option<Witness> = None;
            for _ in 0..count {
                let mu = random_moments(task, &vertices, &mut rng);
                let v = random_v(dim, budget.v_scale, &mut rng);
                let w = evaluate(v, mu)?;
                absorb(&w, eps_grid, &mut best);
                if w.delta_loss >= eps_min && ratio(&w) < worst_ratio.as_ref().map(ratio).unwrap_or(f64::INFINITY) {
                    worst_ratio = Some(w);
                }
            }
            Ok((best, worst_ratio))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best: Vec<Option<Witness>> = vec![None; eps_grid.len()];
    let mut worst_ratio: Option<Witness> = None;
    for (b, r) in per_chunk {
        for w in b.into_iter().flatten() {
            absorb(&w, eps_grid, &mut best);
        }
        if let Some(r) = r {
            if ratio(&r) < worst_ratio.as_ref().map(ratio).unwrap_or(f64::INFINITY) {
                worst_ratio = Some(r);
            }
        }
    }
    if best.iter().all(|b| b.is_none()) {
        return Err(M4nError::NoFeasiblePair);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed.wrapping_add(0x5151));
    let mut evaluated = budget.samples;
    for e in 0..eps_grid.len() {
        let Some(mut cur) = best[e].clone() else { continue };
        let mut radius = 0.25 * budget.v_scale;
        for step in 0..budget.refine_steps {
            let v: Vec<f64> = cur.v.iter().map(|x| x + radius * rng.sample::<f64, _>(StandardNormal)).collect();
            let t = rng.random_range(0.0..(radius / budget.v_scale).min(1.0));
            let target = random_moments(task, &vertices, &mut rng);
            let mu: Vec<f64> = cur.mu.iter().zip(target.values()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let w = evaluate(v, PolytopeState::new(task.layout(), mu)?)?;
            evaluated += 1;
            absorb(&w, eps_grid, &mut best);
            if w.delta_loss >= eps_min && ratio(&w) < worst_ratio.as_ref().map(ratio).unwrap_or(f64::INFINITY) {
                worst_ratio = Some(w.clone());
            }
            if w.delta_loss >= eps_grid[e] && w.delta_surrogate < cur.delta_surrogate {
                cur = w;
            } else if step % 100 == 99 {
                radius *= 0.7;
            }
        }
    }

    let zeta_lower = best.iter().map(|b| b.as_ref().map(|w| w.delta_surrogate.max(0.0)).unwrap_or(f64::INFINITY)).collect();
    let constant_c = constant_c(task)?;
    Ok(CalibrationEstimate {
        task: task.kind(),
        epsilons: eps_grid.to_vec(),
        zeta_lower,
        witnesses: best,
        constant_c,
        constant_d_bound: constant_d(task, constant_c),
        samples_evaluated: evaluated,
        min_ratio: worst_ratio.map(|w| (ratio(&w), w)),
    })
}

fn ratio(w: &Witness) -> f64 {
    w.delta_surrogate / w.delta_loss
}

/// Keeps, for every epsilon, the feasible witness with the smallest surrogate excess. A witness
/// feasible for one epsilon is feasible for all smaller ones, which makes the estimate monotone.
fn absorb(w: &Witness, eps_grid: &[f64], best: &mut [Option<Witness>]) {
    for (e, slot) in eps_grid.iter().zip(best.iter_mut()) {
        if w.delta_loss >= *e && slot.as_ref().map(|b| w.delta_surrogate < b.delta_surrogate).unwrap_or(true) {
            *slot = Some(w.clone());
        }
    }
}

fn constant_d(task: &TaskSpec, c: f64) -> f64 {
    match task.kind() {
        TaskKind::Ranking { items } => items as f64,
        _ => c,
    }
}

/// Loss matrix over an enumerated output space.
fn loss_table(task: &TaskSpec, labels: &[Label]) -> Result<Vec<Vec<f64>>> {
    labels.iter().map(|y| labels.iter().map(|z| task.loss_eval(y, z)).collect()).collect()
}

/// `min { alpha_y : alpha in simplex, y in argmin_y' E_alpha L(y', .) }` for every `y`.
fn min_optimal_mass(table: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = table.len();
    (0..n)
        .map(|y| {
            let mut lp = Problem::new(OptimizationDirection::Minimize);
            let alpha: Vec<_> = (0..n).map(|z| lp.add_var(if z == y { 1.0 } else { 0.0 }, (0.0, 1.0))).collect();
            let simplex: Vec<_> = alpha.iter().map(|a| (*a, 1.0)).collect();
            lp.add_constraint(simplex.as_slice(), ComparisonOp::Eq, 1.0);
            for other in 0..n {
                if other != y {
                    let row: Vec<_> = (0..n).map(|z| (alpha[z], table[y][z] - table[other][z])).collect();
                    lp.add_constraint(row.as_slice(), ComparisonOp::Le, 0.0);
                }
            }
            let sol = lp.solve().map_err(|e| M4nError::LinearProgram(e.to_string()))?;
            Ok(sol.objective().max(0.0))
        })
        .collect()
}

fn check_non_degenerate(table: &[Vec<f64>]) -> Result<()> {
    for (y, row) in table.iter().enumerate() {
        for (z, l) in row.iter().enumerate() {
            if z != y && *l <= row[y] {
                return Err(M4nError::DegenerateLoss(format!("L(y, y) >= L(y, y') for labels {} and {}", y + 1, z + 1)));
            }
        }
    }
    Ok(())
}

/// Tightest `C` such that every optimal label of every distribution has probability at least
/// `1 / C`, by one linear program per label. Chains use the largest per-part constant.
/// Returns `+inf` when some optimal label can have probability zero.
pub fn constant_c(task: &TaskSpec) -> Result<f64> {
    if let TaskKind::Chain { states, .. } = task.kind() {
        let mut worst: f64 = 0.0;
        for block in task.part_losses() {
            let rows: Vec<Vec<f64>> = (0..states).map(|a| block[a * states..(a + 1) * states].to_vec()).collect();
            check_non_degenerate(&rows)?;
            let m = min_optimal_mass(&rows)?.into_iter().fold(f64::INFINITY, f64::min);
            worst = worst.max(if m > 1e-12 { 1.0 / m } else { f64::INFINITY });
        }
        return Ok(worst);
    }
    let labels = task.enumerate_labels(MAX_LABELS)?;
    let table = loss_table(task, &labels)?;
    check_non_degenerate(&table)?;
    let m = min_optimal_mass(&table)?.into_iter().fold(f64::INFINITY, f64::min);
    Ok(if m > 1e-12 { 1.0 / m } else { f64::INFINITY })
}

/// Randomized estimate of [`constant_c`] over `samples` distributions (plus uniform
/// distributions on every small support); it can only underestimate `C`.
pub fn constant_c_sampled(task: &TaskSpec, samples: usize, seed: u64) -> Result<f64> {
    let labels = task.enumerate_labels(MAX_LABELS)?;
    let table = loss_table(task, &labels)?;
    check_non_degenerate(&table)?;
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    let mut visit = |alpha: &[f64]| {
        let risks: Vec<f64> = (0..n).map(|y| (0..n).map(|z| alpha[z] * table[y][z]).sum()).collect();
        let min = risks.iter().cloned().fold(f64::INFINITY, f64::min);
        for y in 0..n {
            if risks[y] <= min + 1e-12 {
                worst = worst.min(alpha[y]);
            }
        }
    };
    if n <= 12 {
        for mask in 1u32..(1 << n) {
            let size = mask.count_ones() as f64;
            let alpha: Vec<f64> = (0..n).map(|z| if mask >> z & 1 == 1 { 1.0 / size } else { 0.0 }).collect();
            visit(&alpha);
        }
    }
    for _ in 0..samples {
        let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let s: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|x| x / s).collect();
        visit(&alpha);
    }
    Ok(if worst > 1e-12 { 1.0 / worst } else { f64::INFINITY })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BirkhoffDecomposition {
    pub permutations: Vec<Label>,
    pub weights: Vec<f64>,
    /// Largest entrywise deviation of `sum_s w_s P_s` from `11^T / M`.
    pub max_residual: f64,
    pub d_bound: f64,
}

/// Decomposes the uniform doubly stochastic matrix into the `M` cyclic shifts with weight `1/M`.
pub fn ranking_d_bound(items: usize) -> Result<BirkhoffDecomposition> {
    let task = TaskSpec::ranking(items)?;
    let m = items as f64;
    let permutations: Vec<Label> = (0..items).map(|s| Label::Permutation((0..items).map(|i| (i + s) % items).collect())).collect();
    let weights = vec![1.0 / m; items];
    let mut mix = vec![0.0; items * items];
    for (p, w) in permutations.iter().zip(&weights) {
        for (x, e) in mix.iter_mut().zip(task.embed(p)?) {
            *x += w * e;
        }
    }
    let max_residual = mix.iter().map(|x| (x - 1.0 / m).abs()).fold(0.0, f64::max);
    Ok(BirkhoffDecomposition { permutations, weights, max_residual, d_bound: m })
}
