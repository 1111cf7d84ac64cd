//! Max-min oracle `argmax_mu min_nu nu^T A mu + v^T mu` by saddle-point mirror prox, its
//! certified duality gap, the warm-start cache, and an exact LP oracle for simplex tasks.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, M4nError, Result};
use crate::loss::{Layout, PolytopeState, TaskSpec};
use crate::projection::{player_step, spmp_constants, Player, SinkhornOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpmpOptions {
    /// Number of extra-gradient rounds `K`.
    pub iterations: usize,
    /// Overrides the default `1 / (2 L)`.
    pub eta: Option<f64>,
    /// Stop early once the certified gap of the running averages drops below this value.
    pub tolerance: Option<f64>,
    /// How often (in rounds) the early-stopping gap is evaluated.
    pub check_every: usize,
    pub sinkhorn: SinkhornOptions,
}

impl SpmpOptions {
    pub fn with_iterations(iterations: usize) -> Self {
        Self { iterations, ..Self::default() }
    }
}

impl Default for SpmpOptions {
    fn default() -> Self {
        Self { iterations: 20, eta: None, tolerance: None, check_every: 5, sinkhorn: SinkhornOptions::relaxed() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Average of the max player's half-step iterates.
    pub mu_bar: PolytopeState,
    /// Average of the min player's half-step iterates.
    pub nu_bar: PolytopeState,
    /// Last full-step iterates, the warm-start continuation point.
    pub mu_last: PolytopeState,
    pub nu_last: PolytopeState,
    pub gap: f64,
    pub iterations: usize,
    /// `nu_bar^T A mu_bar + v^T mu_bar` (centered).
    pub saddle_value: f64,
    /// `max_mu F(nu_bar, mu)`.
    pub upper_value: f64,
    /// `min_nu F(nu, mu_bar)`.
    pub lower_value: f64,
}

/// Lower and upper values bracketing the saddle value of `F(nu, mu) = nu^T A mu + v^T mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaddleBounds {
    pub lower: f64,
    pub upper: f64,
}

impl SaddleBounds {
    pub fn gap(&self) -> f64 {
        self.upper - self.lower
    }
}

/// `min_nu F(nu, mu)` and `max_mu F(nu, mu)` by combinatorial decoding.
pub fn saddle_bounds(mu: &PolytopeState, nu: &PolytopeState, v: &[f64], task: &TaskSpec) -> Result<SaddleBounds> {
    mu.expect_layout(task.layout())?;
    nu.expect_layout(task.layout())?;
    if v.len() != task.embed_dim() {
        return Err(M4nError::DimensionMismatch { expected: task.embed_dim(), got: v.len() });
    }
    let mut scores = task.matrix().apply_transpose(nu.values());
    for (s, vi) in scores.iter_mut().zip(v) {
        *s += vi;
    }
    let (upper, _) = task.max_vertex(&scores)?;
    let (risk, _) = task.bayes_risk(mu)?;
    Ok(SaddleBounds { lower: risk + mu.dot(v), upper })
}

/// Duality gap `max_mu F(nu, mu) - min_nu F(nu, mu)` of a candidate pair.
pub fn certified_gap(mu: &PolytopeState, nu: &PolytopeState, v: &[f64], task: &TaskSpec) -> Result<f64> {
    saddle_bounds(mu, nu, v, task).map(|b| b.gap())
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn averaged(layout: Layout, sum: &[f64], count: usize) -> PolytopeState {
    let values = sum.iter().map(|s| s / count as f64).collect();
    PolytopeState::new(layout, values).expect("average of finite states is finite")
}

/// Saddle-point mirror prox for the max-min oracle. Starts from `init` (or the uniform
/// point), runs `opts.iterations` extra-gradient rounds and returns the averaged half-step
/// iterates with their certified gap.
pub fn spmp_solve(v: &[f64], task: &TaskSpec, init: Option<(PolytopeState, PolytopeState)>, opts: &SpmpOptions) -> Result<OracleResult> {
    if opts.iterations == 0 {
        return Err(M4nError::InvalidArgument("oracle needs at least one iteration".into()));
    }
    if v.len() != task.embed_dim() {
        return Err(M4nError::DimensionMismatch { expected: task.embed_dim(), got: v.len() });
    }
    check_finite(v, "oracle scores")?;
    let layout = task.layout();
    let (mut mu, mut nu) = match init {
        Some((m, n)) => {
            m.expect_layout(layout)?;
            n.expect_layout(layout)?;
            (m, n)
        }
        None => (PolytopeState::uniform(layout), PolytopeState::uniform(layout)),
    };
    let mirror = spmp_constants(task);
    let eta = opts.eta.unwrap_or_else(|| mirror.default_eta());
    let (step_nu, step_mu) = mirror.player_steps(eta);
    let a = task.matrix();
    let dim = layout.dim();
    let mut mu_sum = vec![0.0; dim];
    let mut nu_sum = vec![0.0; dim];

    let mu_grad = |nu: &PolytopeState| -> Vec<f64> {
        let mut g = a.apply_transpose(nu.values());
        add_into(&mut g, v);
        g
    };
    let nu_grad = |mu: &PolytopeState| -> Vec<f64> { a.apply(mu.values()).into_iter().map(|x| -x).collect() };
    let step = |player: Player, prev: &PolytopeState, grad: &[f64], eta: f64, iteration: usize| {
        player_step(task, player, prev, grad, eta, opts.sinkhorn).map_err(|e| M4nError::Oracle {
            iteration,
            player: player.name(),
            source: Box::new(e),
        })
    };

    let mut rounds = 0;
    for k in 0..opts.iterations {
        let mu_half = step(Player::Max, &mu, &mu_grad(&nu), step_mu, k)?;
        let nu_half = step(Player::Min, &nu, &nu_grad(&mu), step_nu, k)?;
        let mu_next = step(Player::Max, &mu, &mu_grad(&nu_half), step_mu, k)?;
        let nu_next = step(Player::Min, &nu, &nu_grad(&mu_half), step_nu, k)?;
        add_into(&mut mu_sum, mu_half.values());
        add_into(&mut nu_sum, nu_half.values());
        mu = mu_next;
        nu = nu_next;
        rounds = k + 1;
        if let Some(tol) = opts.tolerance {
            if rounds % opts.check_every.max(1) == 0 && rounds < opts.iterations {
                let gap = certified_gap(&averaged(layout, &mu_sum, rounds), &averaged(layout, &nu_sum, rounds), v, task)?;
                if gap <= tol {
                    break;
                }
            }
        }
    }
    let mu_bar = averaged(layout, &mu_sum, rounds);
    let nu_bar = averaged(layout, &nu_sum, rounds);
    let bounds = saddle_bounds(&mu_bar, &nu_bar, v, task)?;
    let saddle_value = a.bilinear(nu_bar.values(), mu_bar.values()) + mu_bar.dot(v);
    Ok(OracleResult {
        mu_bar,
        nu_bar,
        mu_last: mu,
        nu_last: nu,
        gap: bounds.gap(),
        iterations: rounds,
        saddle_value,
        upper_value: bounds.upper,
        lower_value: bounds.lower,
    })
}

/// Per-example store of the last saddle iterates.
#[derive(Debug, Clone, Default)]
pub struct WarmStartCache {
    slots: Vec<Option<(PolytopeState, PolytopeState)>>,
}

impl WarmStartCache {
    pub fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    /// Cached `(mu, nu)` re-floored, or the uniform pair on a miss.
    pub fn lookup(&self, index: usize, layout: Layout) -> (PolytopeState, PolytopeState) {
        match self.slots.get(index) {
            Some(Some((mu, nu))) if mu.layout() == layout => (mu.clone().floored(), nu.clone().floored()),
            _ => (PolytopeState::uniform(layout), PolytopeState::uniform(layout)),
        }
    }

    pub fn store(&mut self, index: usize, mu: PolytopeState, nu: PolytopeState) {
        if index >= self.slots.len() {
            self.slots.resize(index + 1, None);
        }
        self.slots[index] = Some((mu, nu));
    }

    pub fn get(&self, index: usize) -> Option<&(PolytopeState, PolytopeState)> {
        self.slots.get(index).and_then(|s| s.as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Exact oracle for simplex tasks by linear programming:
/// `max_{mu in simplex} min_y (A mu)_y + v^T mu`.
/// With `anchor`, the optimal face is searched for the point closest to it in L1, which
/// keeps repeated calls from jumping between optimal vertices.
pub fn exact_simplex_oracle(task: &TaskSpec, v: &[f64], anchor: Option<&[f64]>) -> Result<(PolytopeState, f64)> {
    let Layout::Simplex { k } = task.layout() else {
        return Err(M4nError::LayoutMismatch { expected: "simplex".into(), got: task.layout().describe() });
    };
    if v.len() != k {
        return Err(M4nError::DimensionMismatch { expected: k, got: v.len() });
    }
    check_finite(v, "oracle scores")?;
    let a = task.matrix().to_dense();
    let lp_err = |e: minilp::Error| M4nError::LinearProgram(e.to_string());

    let mut first = Problem::new(OptimizationDirection::Maximize);
    let mu: Vec<_> = v.iter().map(|vi| first.add_var(*vi, (0.0, 1.0))).collect();
    let t = first.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
    for y in 0..k {
        let mut row = vec![(t, 1.0)];
        row.extend((0..k).map(|j| (mu[j], -a[y * k + j])));
        first.add_constraint(row.as_slice(), ComparisonOp::Le, 0.0);
    }
    let simplex: Vec<_> = mu.iter().map(|m| (*m, 1.0)).collect();
    first.add_constraint(simplex.as_slice(), ComparisonOp::Eq, 1.0);
    let sol = first.solve().map_err(lp_err)?;
    let opt = sol.objective();
    let mut point: Vec<f64> = mu.iter().map(|m| sol[*m]).collect();

    if let Some(anchor) = anchor {
        let mut second = Problem::new(OptimizationDirection::Minimize);
        let mu2: Vec<_> = (0..k).map(|_| second.add_var(0.0, (0.0, 1.0))).collect();
        let t2 = second.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY));
        let d: Vec<_> = (0..k).map(|_| second.add_var(1.0, (0.0, f64::INFINITY))).collect();
        for y in 0..k {
            let mut row = vec![(t2, 1.0)];
            row.extend((0..k).map(|j| (mu2[j], -a[y * k + j])));
            second.add_constraint(row.as_slice(), ComparisonOp::Le, 0.0);
        }
        let simplex: Vec<_> = mu2.iter().map(|m| (*m, 1.0)).collect();
        second.add_constraint(simplex.as_slice(), ComparisonOp::Eq, 1.0);
        let mut objective = vec![(t2, 1.0)];
        objective.extend(mu2.iter().zip(v).map(|(m, vi)| (*m, *vi)));
        second.add_constraint(objective.as_slice(), ComparisonOp::Ge, opt - 1e-10 * (1.0 + opt.abs()));
        for j in 0..k {
            second.add_constraint(&[(d[j], 1.0), (mu2[j], -1.0)], ComparisonOp::Ge, -anchor[j]);
            second.add_constraint(&[(d[j], 1.0), (mu2[j], 1.0)], ComparisonOp::Ge, anchor[j]);
        }
        if let Ok(sol2) = second.solve() {
            point = mu2.iter().map(|m| sol2[*m]).collect();
        }
    }
    for x in point.iter_mut() {
        *x = x.clamp(0.0, 1.0);
    }
    let s: f64 = point.iter().sum();
    for x in point.iter_mut() {
        *x /= s;
    }
    Ok((PolytopeState::new(task.layout(), point)?, opt))
}

/// Exact partition function `max_mu min_y (A mu)_y + v^T mu` for simplex tasks.
pub fn exact_partition_function(task: &TaskSpec, v: &[f64]) -> Result<f64> {
    exact_simplex_oracle(task, v, None).map(|(_, value)| value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_pair_is_binary_saddle() {
        let t = TaskSpec::binary();
        let u = PolytopeState::uniform(t.layout());
        assert!(certified_gap(&u, &u, &[0.0, 0.0], &t).unwrap().abs() < 1e-10);
    }

    #[test]
    fn exact_oracle_binary_zero() {
        let t = TaskSpec::binary();
        let value = exact_partition_function(&t, &[0.0, 0.0]).unwrap();
        assert!((value - 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_iterations_rejected() {
        let t = TaskSpec::binary();
        assert!(spmp_solve(&[0.0, 0.0], &t, None, &SpmpOptions::with_iterations(0)).is_err());
    }
}
