use serde::{Deserialize, Serialize};

use crate::error::{M4nError, Result};

/// Smallest entry kept after a projection or a cache read.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Coordinate layout of a point in a task's marginal polytope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    Simplex { k: usize },
    /// `parts` unary blocks of size `states`, then `parts - 1` pairwise blocks of size `states^2`.
    /// Pairwise entry `a * states + b` is the marginal of `(y_m, y_{m+1}) = (a, b)`.
    Chain { parts: usize, states: usize },
    /// Row-major `items x items` doubly stochastic matrix.
    Birkhoff { items: usize },
}

impl Layout {
    pub fn dim(&self) -> usize {
        match *self {
            Layout::Simplex { k } => k,
            Layout::Chain { parts, states } => parts * states + parts.saturating_sub(1) * states * states,
            Layout::Birkhoff { items } => items * items,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Layout::Simplex { k } => format!("simplex({k})"),
            Layout::Chain { parts, states } => format!("chain({parts}, {states})"),
            Layout::Birkhoff { items } => format!("birkhoff({items})"),
        }
    }

    /// Offset of the unary block of part `m` (chain layouts).
    pub(crate) fn unary_offset(parts: usize, states: usize, m: usize) -> usize {
        debug_assert!(m < parts);
        m * states
    }

    /// Offset of the pairwise block between parts `m` and `m + 1` (chain layouts).
    pub fn pair_offset(parts: usize, states: usize, m: usize) -> usize {
        debug_assert!(m + 1 < parts);
        parts * states + m * states * states
    }
}

/// A point of a marginal polytope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolytopeState {
    layout: Layout,
    values: Vec<f64>,
}

impl PolytopeState {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(M4nError::DimensionMismatch { expected: layout.dim(), got: values.len() });
        }
        crate::error::check_finite(&values, "polytope state")?;
        Ok(Self { layout, values })
    }

    pub(crate) fn from_parts_unchecked(layout: Layout, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), layout.dim());
        Self { layout, values }
    }

    /// The entropy maximizer: uniform marginals for every layout.
    pub fn uniform(layout: Layout) -> Self {
        let values = match layout {
            Layout::Simplex { k } => vec![1.0 / k as f64; k],
            Layout::Chain { parts, states } => {
                let r = states as f64;
                let mut v = vec![1.0 / r; parts * states];
                v.extend(std::iter::repeat_n(1.0 / (r * r), parts.saturating_sub(1) * states * states));
                v
            }
            Layout::Birkhoff { items } => vec![1.0 / items as f64; items * items],
        };
        Self { layout, values }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.values.iter().zip(v).map(|(a, b)| a * b).sum()
    }

    pub fn expect_layout(&self, layout: Layout) -> Result<()> {
        if self.layout == layout {
            Ok(())
        } else {
            Err(M4nError::LayoutMismatch { expected: layout.describe(), got: self.layout.describe() })
        }
    }

    /// Convex combination `(1 - gamma) * self + gamma * other`.
    pub fn mix(&self, other: &PolytopeState, gamma: f64) -> Result<PolytopeState> {
        other.expect_layout(self.layout)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| (1.0 - gamma) * a + gamma * b).collect();
        Ok(Self { layout: self.layout, values })
    }

    /// Pulls every entry up to at least [`PROBABILITY_FLOOR`] by mixing with the uniform point,
    /// which keeps all linear constraints of the layout intact. Entries already above the
    /// floor leave the state untouched.
    pub fn floored(mut self) -> Self {
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        if min >= PROBABILITY_FLOOR {
            return self;
        }
        let block = match self.layout {
            Layout::Simplex { k } => k,
            Layout::Chain { states, parts } => if parts > 1 { states * states } else { states },
            Layout::Birkhoff { items } => items,
        } as f64;
        let w = (2.0 * PROBABILITY_FLOOR * block).min(1.0);
        let uniform = Self::uniform(self.layout);
        for (x, u) in self.values.iter_mut().zip(uniform.values) {
            *x = (1.0 - w) * x.max(0.0) + w * u;
        }
        self
    }

    /// Checks the layout invariants: simplex and chain block sums within `1e-9`,
    /// chain local consistency within `1e-8`, Birkhoff row/column sums within `1e-6`.
    pub fn check_invariants(&self) -> Result<()> {
        self.check_with(1e-9, 1e-8, 1e-6)
    }

    pub fn check_with(&self, sum_tol: f64, consistency_tol: f64, birkhoff_tol: f64) -> Result<()> {
        let bad = |msg: String| Err(M4nError::InvalidArgument(format!("{} state: {msg}", self.layout.describe())));
        if let Some(x) = self.values.iter().find(|x| !x.is_finite() || **x < -1e-12) {
            return bad(format!("entry {x} is negative or non-finite"));
        }
        match self.layout {
            Layout::Simplex { .. } => {
                let s: f64 = self.values.iter().sum();
                if (s - 1.0).abs() > sum_tol {
                    return bad(format!("sums to {s}"));
                }
            }
            Layout::Chain { parts, states } => {
                for m in 0..parts {
                    let o = Layout::unary_offset(parts, states, m);
                    let s: f64 = self.values[o..o + states].iter().sum();
                    if (s - 1.0).abs() > sum_tol {
                        return bad(format!("unary block {m} sums to {s}"));
                    }
                }
                for m in 0..parts.saturating_sub(1) {
                    let p = Layout::pair_offset(parts, states, m);
                    let block = &self.values[p..p + states * states];
                    let s: f64 = block.iter().sum();
                    if (s - 1.0).abs() > sum_tol {
                        return bad(format!("pairwise block {m} sums to {s}"));
                    }
                    let left = &self.values[m * states..(m + 1) * states];
                    let right = &self.values[(m + 1) * states..(m + 2) * states];
                    for a in 0..states {
                        let row: f64 = block[a * states..(a + 1) * states].iter().sum();
                        let col: f64 = (0..states).map(|b| block[b * states + a]).sum();
                        if (row - left[a]).abs() > consistency_tol || (col - right[a]).abs() > consistency_tol {
                            return bad(format!("pairwise block {m} is not consistent with its unaries"));
                        }
                    }
                }
            }
            Layout::Birkhoff { items } => {
                if let Some(x) = self.values.iter().find(|x| **x > 1.0 + 1e-12) {
                    return bad(format!("entry {x} exceeds 1"));
                }
                let (r, c) = birkhoff_residual_parts(&self.values, items);
                if r.max(c) > birkhoff_tol {
                    return bad(format!("row/column sums deviate by {:.3e}", r.max(c)));
                }
            }
        }
        Ok(())
    }
}

/// Max absolute deviation of row sums and column sums from 1.
pub(crate) fn birkhoff_residual_parts(values: &[f64], items: usize) -> (f64, f64) {
    let mut row_dev: f64 = 0.0;
    let mut col_dev: f64 = 0.0;
    for i in 0..items {
        let r: f64 = values[i * items..(i + 1) * items].iter().sum();
        row_dev = row_dev.max((r - 1.0).abs());
        let c: f64 = (0..items).map(|j| values[j * items + i]).sum();
        col_dev = col_dev.max((c - 1.0).abs());
    }
    (row_dev, col_dev)
}
