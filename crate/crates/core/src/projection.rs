//! Entropic Bregman projections onto marginal polytopes and the mirror-map constants
//! used to scale saddle-point steps.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, M4nError, Result};
use crate::loss::polytope::birkhoff_residual_parts;
use crate::loss::{Layout, PolytopeState, TaskKind, TaskSpec, PROBABILITY_FLOOR};

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_step(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(M4nError::InvalidArgument(format!("step size must be positive and finite, got {eta}")))
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let lse = log_sum_exp(logits);
    for x in logits.iter_mut() {
        *x = (*x - lse).exp();
    }
    let s: f64 = logits.iter().sum();
    for x in logits.iter_mut() {
        *x /= s;
    }
}

fn floor_simplex(p: &mut [f64]) {
    if p.iter().any(|x| *x < PROBABILITY_FLOOR) {
        for x in p.iter_mut() {
            *x = x.max(PROBABILITY_FLOOR);
        }
        let s: f64 = p.iter().sum();
        for x in p.iter_mut() {
            *x /= s;
        }
    }
}

/// Shannon entropy `-sum p log p` (with `0 log 0 = 0`).
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Exponentiated-gradient step: the result is proportional to `mu_prev * exp(eta * grad)`.
pub fn project_simplex_entropic(mu_prev: &[f64], grad: &[f64], eta: f64) -> Result<Vec<f64>> {
    if mu_prev.len() != grad.len() {
        return Err(M4nError::DimensionMismatch { expected: mu_prev.len(), got: grad.len() });
    }
    check_step(eta)?;
    check_finite(grad, "simplex gradient")?;
    let mut logits: Vec<f64> = mu_prev.iter().zip(grad).map(|(p, g)| p.max(PROBABILITY_FLOOR).ln() + eta * g).collect();
    softmax_in_place(&mut logits);
    floor_simplex(&mut logits);
    Ok(logits)
}

/// Junction-tree entropy of a chain state: pairwise entropies minus interior unary entropies.
pub fn chain_entropy(state: &PolytopeState) -> f64 {
    let Layout::Chain { parts, states } = state.layout() else {
        return shannon_entropy(state.values());
    };
    let v = state.values();
    if parts == 1 {
        return shannon_entropy(&v[..states]);
    }
    let pairs: f64 = (0..parts - 1)
        .map(|m| {
            let o = Layout::pair_offset(parts, states, m);
            shannon_entropy(&v[o..o + states * states])
        })
        .sum();
    let interior: f64 = (1..parts - 1).map(|m| shannon_entropy(&v[m * states..(m + 1) * states])).sum();
    pairs - interior
}

/// Separable entropy of the unary blocks only.
pub fn product_entropy(state: &PolytopeState) -> f64 {
    match state.layout() {
        Layout::Chain { parts, states } => (0..parts).map(|m| shannon_entropy(&state.values()[m * states..(m + 1) * states])).sum(),
        _ => shannon_entropy(state.values()),
    }
}

/// Canonical chain parameters of the maximum-entropy distribution with the given marginals.
fn chain_canonical(values: &[f64], parts: usize, states: usize) -> (Vec<f64>, Vec<f64>) {
    let r = states;
    let lg = |x: f64| x.max(PROBABILITY_FLOOR).ln();
    let mut unary = vec![0.0; parts * r];
    let mut pair = vec![0.0; parts.saturating_sub(1) * r * r];
    if parts == 1 {
        for a in 0..r {
            unary[a] = lg(values[a]);
        }
        return (unary, pair);
    }
    for m in 1..parts - 1 {
        for a in 0..r {
            unary[m * r + a] = -lg(values[m * r + a]);
        }
    }
    for m in 0..parts - 1 {
        let o = Layout::pair_offset(parts, r, m);
        for ab in 0..r * r {
            pair[m * r * r + ab] = lg(values[o + ab]);
        }
    }
    (unary, pair)
}

/// Marginals of the chain Gibbs distribution `q(y) ∝ exp(sum_m unary[m][y_m] + sum_m pair[m][y_m, y_m+1])`,
/// computed by log-domain forward-backward.
pub fn chain_marginals(unary: &[f64], pair: &[f64], parts: usize, states: usize) -> Vec<f64> {
    let r = states;
    let layout = Layout::Chain { parts, states };
    let mut out = vec![0.0; layout.dim()];
    if parts == 1 {
        let mut p = unary[..r].to_vec();
        softmax_in_place(&mut p);
        out[..r].copy_from_slice(&p);
        return out;
    }
    let psi = |m: usize, a: usize, b: usize| pair[m * r * r + a * r + b];
    // alpha[m][a]: log-sum over prefixes ending at y_m = a, unary of m included
    let mut alpha = vec![0.0; parts * r];
    alpha[..r].copy_from_slice(&unary[..r]);
    let mut buf = vec![0.0; r];
    for m in 1..parts {
        for b in 0..r {
            for a in 0..r {
                buf[a] = alpha[(m - 1) * r + a] + psi(m - 1, a, b);
            }
            alpha[m * r + b] = unary[m * r + b] + log_sum_exp(&buf);
        }
    }
    // beta[m][a]: log-sum over suffixes after y_m = a, unary of m excluded
    let mut beta = vec![0.0; parts * r];
    for m in (0..parts - 1).rev() {
        for a in 0..r {
            for b in 0..r {
                buf[b] = psi(m, a, b) + unary[(m + 1) * r + b] + beta[(m + 1) * r + b];
            }
            beta[m * r + a] = log_sum_exp(&buf);
        }
    }
    let mut block = vec![0.0; r * r];
    for m in 0..parts - 1 {
        for a in 0..r {
            for b in 0..r {
                block[a * r + b] = alpha[m * r + a] + psi(m, a, b) + unary[(m + 1) * r + b] + beta[(m + 1) * r + b];
            }
        }
        softmax_in_place(&mut block);
        let o = Layout::pair_offset(parts, r, m);
        out[o..o + r * r].copy_from_slice(&block);
    }
    fill_unaries_from_pairs(&mut out, parts, r);
    out
}

/// Recomputes unary blocks as marginals of the pairwise blocks (left marginal of block `m`,
/// right marginal of the last block).
fn fill_unaries_from_pairs(values: &mut [f64], parts: usize, r: usize) {
    for m in 0..parts - 1 {
        let o = Layout::pair_offset(parts, r, m);
        for a in 0..r {
            values[m * r + a] = values[o + a * r..o + (a + 1) * r].iter().sum();
        }
    }
    let o = Layout::pair_offset(parts, r, parts - 2);
    for b in 0..r {
        values[(parts - 1) * r + b] = (0..r).map(|a| values[o + a * r + b]).sum();
    }
}

fn floor_chain(values: &mut [f64], parts: usize, r: usize) {
    if !values.iter().any(|x| *x < PROBABILITY_FLOOR) {
        return;
    }
    // a convex mix with the uniform point keeps pairwise/unary consistency exactly
    let uniform = PolytopeState::uniform(Layout::Chain { parts, states: r });
    let w = 2.0 * PROBABILITY_FLOOR * (r * r) as f64;
    for (x, u) in values.iter_mut().zip(uniform.values()) {
        *x = (1.0 - w) * x.max(0.0) + w * u;
    }
    if parts > 1 {
        fill_unaries_from_pairs(values, parts, r);
    }
}

/// Bregman projection for the junction-tree chain entropy: runs sum-product on the canonical
/// parameters of `mu_prev` shifted by `eta * grad`.
pub fn project_chain_entropic(mu_prev: &PolytopeState, grad: &[f64], eta: f64) -> Result<PolytopeState> {
    let Layout::Chain { parts, states } = mu_prev.layout() else {
        return Err(M4nError::LayoutMismatch { expected: "chain".into(), got: mu_prev.layout().describe() });
    };
    if grad.len() != mu_prev.dim() {
        return Err(M4nError::DimensionMismatch { expected: mu_prev.dim(), got: grad.len() });
    }
    check_step(eta)?;
    check_finite(grad, "chain gradient")?;
    let r = states;
    let (mut unary, mut pair) = chain_canonical(mu_prev.values(), parts, r);
    for (u, g) in unary.iter_mut().zip(&grad[..parts * r]) {
        *u += eta * g;
    }
    for (p, g) in pair.iter_mut().zip(&grad[parts * r..]) {
        *p += eta * g;
    }
    check_finite(&unary, "chain potentials")?;
    check_finite(&pair, "chain potentials")?;
    let mut values = chain_marginals(&unary, &pair, parts, r);
    floor_chain(&mut values, parts, r);
    Ok(PolytopeState::from_parts_unchecked(mu_prev.layout(), values))
}

/// Projection for the separable entropy on a product of simplices (one per chain part).
/// Only unary coordinates of `grad` matter; pairwise blocks are filled with products of
/// adjacent unaries so the result is a valid chain state.
pub fn project_product_simplex(nu_prev: &PolytopeState, grad: &[f64], eta: f64) -> Result<PolytopeState> {
    let Layout::Chain { parts, states } = nu_prev.layout() else {
        return Err(M4nError::LayoutMismatch { expected: "chain".into(), got: nu_prev.layout().describe() });
    };
    if grad.len() != nu_prev.dim() {
        return Err(M4nError::DimensionMismatch { expected: nu_prev.dim(), got: grad.len() });
    }
    let r = states;
    let mut values = vec![0.0; nu_prev.dim()];
    for m in 0..parts {
        let block = project_simplex_entropic(&nu_prev.values()[m * r..(m + 1) * r], &grad[m * r..(m + 1) * r], eta)?;
        values[m * r..(m + 1) * r].copy_from_slice(&block);
    }
    for m in 0..parts.saturating_sub(1) {
        let o = Layout::pair_offset(parts, r, m);
        for a in 0..r {
            for b in 0..r {
                values[o + a * r + b] = values[m * r + a] * values[(m + 1) * r + b];
            }
        }
    }
    Ok(PolytopeState::from_parts_unchecked(nu_prev.layout(), values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Residual up to which a stalled run is rounded onto the polytope instead of rejected.
    pub accept_tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 10_000, accept_tol: 1e-8 }
    }
}

impl SinkhornOptions {
    /// Capped iterations with rounding onto the polytope, for projections inside training where
    /// near-degenerate iterates make Sinkhorn converge very slowly.
    pub fn relaxed() -> Self {
        Self { tol: 1e-8, max_iter: 500, accept_tol: 1e-2 }
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    pub state: PolytopeState,
    pub iterations: usize,
    pub residual: f64,
    /// Residual after each row/column sweep.
    pub trace: Vec<f64>,
}

/// Bregman projection onto the Birkhoff polytope under `-sum Q log Q`: log-domain
/// Sinkhorn scaling of `mu_prev * exp(eta * grad)`.
pub fn project_birkhoff_sinkhorn(mu_prev: &PolytopeState, grad: &[f64], eta: f64, opts: SinkhornOptions) -> Result<PolytopeState> {
    sinkhorn_with_trace(mu_prev, grad, eta, opts).map(|o| o.state)
}

/// As [`project_birkhoff_sinkhorn`], also returning the residual trace.
/// The residual is the L1 deviation of the row sums after each column normalization.
pub fn sinkhorn_with_trace(mu_prev: &PolytopeState, grad: &[f64], eta: f64, opts: SinkhornOptions) -> Result<SinkhornOutput> {
    let Layout::Birkhoff { items: n } = mu_prev.layout() else {
        return Err(M4nError::LayoutMismatch { expected: "birkhoff".into(), got: mu_prev.layout().describe() });
    };
    if grad.len() != n * n {
        return Err(M4nError::DimensionMismatch { expected: n * n, got: grad.len() });
    }
    check_step(eta)?;
    check_finite(grad, "sinkhorn gradient")?;
    let kernel: Vec<f64> = mu_prev.values().iter().zip(grad).map(|(p, g)| p.max(PROBABILITY_FLOOR).ln() + eta * g).collect();
    check_finite(&kernel, "sinkhorn kernel")?;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        for i in 0..n {
            for j in 0..n {
                buf[j] = kernel[i * n + j] + g[j];
            }
            f[i] = -log_sum_exp(&buf);
        }
        for j in 0..n {
            for i in 0..n {
                buf[i] = kernel[i * n + j] + f[i];
            }
            g[j] = -log_sum_exp(&buf);
        }
        residual = (0..n)
            .map(|i| {
                let row: f64 = (0..n).map(|j| (kernel[i * n + j] + f[i] + g[j]).exp()).sum();
                (row - 1.0).abs()
            })
            .sum();
        trace.push(residual);
        if residual <= opts.tol {
            break;
        }
    }
    if !(residual <= opts.tol.max(opts.accept_tol)) {
        return Err(M4nError::SinkhornDiverged { iterations, residual });
    }
    let mut values: Vec<f64> = (0..n * n).map(|idx| (kernel[idx] + f[idx / n] + g[idx % n]).exp()).collect();
    if residual > opts.tol {
        round_to_birkhoff(&mut values, n);
    }
    let state = PolytopeState::from_parts_unchecked(mu_prev.layout(), values).floored();
    let (r, c) = birkhoff_residual_parts(state.values(), n);
    Ok(SinkhornOutput { state, iterations, residual: residual.max(r).max(c), trace })
}

/// Moves a positive matrix onto the doubly stochastic set: shrink rows and columns with
/// excess mass, then add the rank-one correction `r c^T / |r|_1` of the remaining deficits.
fn round_to_birkhoff(x: &mut [f64], n: usize) {
    for i in 0..n {
        let s: f64 = x[i * n..(i + 1) * n].iter().sum();
        if s > 1.0 {
            x[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= s);
        }
    }
    for j in 0..n {
        let s: f64 = (0..n).map(|i| x[i * n + j]).sum();
        if s > 1.0 {
            (0..n).for_each(|i| x[i * n + j] /= s);
        }
    }
    let rows: Vec<f64> = (0..n).map(|i| 1.0 - x[i * n..(i + 1) * n].iter().sum::<f64>()).collect();
    let cols: Vec<f64> = (0..n).map(|j| 1.0 - (0..n).map(|i| x[i * n + j]).sum::<f64>()).collect();
    let total: f64 = rows.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..n {
                x[i * n + j] += rows[i] * cols[j] / total;
            }
        }
    }
}

/// Which side of the bilinear game `min_nu max_mu nu^T A mu + v^T mu` a state belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Player {
    /// The maximizing `mu` player.
    Max,
    /// The minimizing `nu` player.
    Min,
}

impl Player {
    pub fn name(self) -> &'static str {
        match self {
            Player::Max => "max",
            Player::Min => "min",
        }
    }
}

/// Mirror-map constants for one task: entropies, strong convexity, ranges and the
/// smoothness bundle that fixes the default saddle-point step.
/// `X` is the minimizing player and `Y` the maximizing one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MirrorMap {
    pub kind: TaskKind,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// `max H - min H` of the (unscaled) entropy of each player.
    pub entropy_range_x: f64,
    pub entropy_range_y: f64,
    /// `(beta_11, beta_12, beta_21, beta_22)`.
    pub beta: [f64; 4],
    pub l_spmp: f64,
}

impl MirrorMap {
    /// Range of the 1-strongly convex rescaling, `entropy_range / sigma`.
    pub fn r2_x(&self) -> f64 {
        self.entropy_range_x / self.sigma_x
    }

    pub fn r2_y(&self) -> f64 {
        self.entropy_range_y / self.sigma_y
    }

    /// `max(b11 Rx^2, b22 Ry^2, b12 Rx Ry, b21 Rx Ry)`.
    pub fn smoothness_bound(&self) -> f64 {
        let (rx, ry) = (self.r2_x().sqrt(), self.r2_y().sqrt());
        let [b11, b12, b21, b22] = self.beta;
        (b11 * rx * rx).max(b22 * ry * ry).max(b12 * rx * ry).max(b21 * rx * ry)
    }

    pub fn default_eta(&self) -> f64 {
        1.0 / (2.0 * self.l_spmp)
    }

    /// Step applied to each player's own entropy when the joint mirror map is normalized by
    /// the ranges: `(min player, max player)`.
    pub fn player_steps(&self, eta: f64) -> (f64, f64) {
        (eta * self.entropy_range_x, eta * self.entropy_range_y)
    }

    pub fn entropy(&self, player: Player, state: &PolytopeState) -> f64 {
        match (self.kind, player) {
            (TaskKind::Chain { .. }, Player::Max) => chain_entropy(state),
            (TaskKind::Chain { .. }, Player::Min) => product_entropy(state),
            _ => shannon_entropy(state.values()),
        }
    }
}

/// Mirror-map constants; flat tasks are treated as single-part chains.
pub fn spmp_constants(task: &TaskSpec) -> MirrorMap {
    let kind = task.kind();
    match kind {
        TaskKind::Ranking { items } => {
            let m = items as f64;
            MirrorMap { kind, sigma_x: 1.0, sigma_y: 1.0, entropy_range_x: m, entropy_range_y: m, beta: [0.0, 0.0, 1.0, 1.0], l_spmp: m }
        }
        _ => {
            let (parts, states) = match kind {
                TaskKind::Chain { parts, states } => (parts, states),
                TaskKind::Multiclass { k } | TaskKind::Ordinal { k } => (1, k),
                TaskKind::Ranking { .. } => unreachable!(),
            };
            let range = parts as f64 * (states as f64).ln();
            let diam2 = 2.0 * (2 * parts - 1) as f64;
            let norm2 = task.max_part_spectral_norm();
            MirrorMap {
                kind,
                sigma_x: 1.0,
                sigma_y: 1.0 / diam2,
                entropy_range_x: range,
                entropy_range_y: range,
                beta: [0.0, task.max_part_abs_entry(), 0.0, norm2],
                l_spmp: norm2 * diam2 * range,
            }
        }
    }
}

/// One mirror step for `player` of `task`: projection of `prev` moved along `grad` with `step`.
pub fn player_step(
    task: &TaskSpec,
    player: Player,
    prev: &PolytopeState,
    grad: &[f64],
    step: f64,
    sinkhorn: SinkhornOptions,
) -> Result<PolytopeState> {
    match (task.layout(), player) {
        (Layout::Simplex { .. }, _) => {
            let v = project_simplex_entropic(prev.values(), grad, step)?;
            Ok(PolytopeState::from_parts_unchecked(prev.layout(), v))
        }
        (Layout::Chain { .. }, Player::Max) => project_chain_entropic(prev, grad, step),
        (Layout::Chain { .. }, Player::Min) => project_product_simplex(prev, grad, step),
        (Layout::Birkhoff { .. }, _) => project_birkhoff_sinkhorn(prev, grad, step, sinkhorn),
    }
}
