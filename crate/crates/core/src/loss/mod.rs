//! Output embeddings, affine loss decompositions `L(y, y') = phi(y)^T A phi(y') + a`,
//! marginal polytopes and combinatorial decoding.

pub mod hungarian;
pub mod polytope;
pub mod viterbi;

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, M4nError, Result};
pub use polytope::{Layout, PolytopeState, PROBABILITY_FLOOR};

/// Output label. Classes and sequence states are 0-based; a permutation `sigma`
/// places item `i` at position `sigma[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Sequence(Vec<usize>),
    Permutation(Vec<usize>),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |xs: &[usize]| xs.iter().map(|x| (x + 1).to_string()).collect::<Vec<_>>().join(",");
        match self {
            Label::Class(c) => write!(f, "{}", c + 1),
            Label::Sequence(s) => write!(f, "[{}]", join(s)),
            Label::Permutation(p) => write!(f, "({})", join(p)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskKind {
    Multiclass { k: usize },
    Ordinal { k: usize },
    Chain { parts: usize, states: usize },
    Ranking { items: usize },
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TaskKind::Multiclass { k } => write!(f, "multiclass({k})"),
            TaskKind::Ordinal { k } => write!(f, "ordinal({k})"),
            TaskKind::Chain { parts, states } => write!(f, "chain({parts}, {states})"),
            TaskKind::Ranking { items } => write!(f, "ranking({items})"),
        }
    }
}

/// The matrix `A` of a loss decomposition, stored in structured form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LossMatrix {
    /// Row-major `dim x dim`.
    Dense { dim: usize, data: Vec<f64> },
    /// Block-diagonal `blocks[m] * scale` on the unary coordinates, zero on pairwise ones.
    ChainUnary { parts: usize, states: usize, blocks: Vec<Vec<f64>>, scale: f64 },
    ScaledIdentity { dim: usize, scale: f64 },
}

impl LossMatrix {
    pub fn dim(&self) -> usize {
        match self {
            LossMatrix::Dense { dim, .. } => *dim,
            LossMatrix::ChainUnary { parts, states, .. } => Layout::Chain { parts: *parts, states: *states }.dim(),
            LossMatrix::ScaledIdentity { dim, .. } => *dim,
        }
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.apply_impl(x, false)
    }

    /// `A^T x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.apply_impl(x, true)
    }

    fn apply_impl(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        match self {
            LossMatrix::Dense { dim, data } => {
                let n = *dim;
                let mut out = vec![0.0; n];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = if transpose {
                        (0..n).map(|j| data[j * n + i] * x[j]).sum()
                    } else {
                        (0..n).map(|j| data[i * n + j] * x[j]).sum()
                    };
                }
                out
            }
            LossMatrix::ChainUnary { parts, states, blocks, scale } => {
                let r = *states;
                let mut out = vec![0.0; self.dim()];
                for (m, block) in blocks.iter().enumerate().take(*parts) {
                    let o = m * r;
                    for a in 0..r {
                        let s: f64 = if transpose {
                            (0..r).map(|b| block[b * r + a] * x[o + b]).sum()
                        } else {
                            (0..r).map(|b| block[a * r + b] * x[o + b]).sum()
                        };
                        out[o + a] = scale * s;
                    }
                }
                out
            }
            LossMatrix::ScaledIdentity { scale, .. } => x.iter().map(|xi| scale * xi).collect(),
        }
    }

    /// `nu^T A mu`.
    pub fn bilinear(&self, nu: &[f64], mu: &[f64]) -> f64 {
        nu.iter().zip(self.apply(mu)).map(|(a, b)| a * b).sum()
    }

    /// Dense copy, mostly for tests and small-instance tooling.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply(&e);
            for i in 0..n {
                out[i * n + j] = col[i];
            }
            e[j] = 0.0;
        }
        out
    }
}

fn spectral_norm(data: &[f64], n: usize) -> f64 {
    let m = DMatrix::from_row_slice(n, n, data);
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// The triple `(phi, A, a)`; `phi` is realized by [`TaskSpec::embed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDecomposition {
    pub embed_dim: usize,
    pub matrix: LossMatrix,
    pub offset: f64,
}

/// A structured prediction task: output space, embedding and loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    kind: TaskKind,
    loss: LossDecomposition,
}

impl TaskSpec {
    /// 0-1 loss over `k` classes, `A = 11^T - I`.
    pub fn multiclass(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(M4nError::InvalidTask(format!("multiclass needs k >= 2, got {k}")));
        }
        let data = (0..k * k).map(|i| if i / k == i % k { 0.0 } else { 1.0 }).collect();
        Ok(Self {
            kind: TaskKind::Multiclass { k },
            loss: LossDecomposition { embed_dim: k, matrix: LossMatrix::Dense { dim: k, data }, offset: 0.0 },
        })
    }

    pub fn binary() -> Self {
        Self::multiclass(2).expect("k = 2 is valid")
    }

    /// Absolute loss `|y - y'|` over `k` ordered classes.
    pub fn ordinal(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(M4nError::InvalidTask(format!("ordinal needs k >= 2, got {k}")));
        }
        let data = (0..k * k).map(|i| ((i / k) as f64 - (i % k) as f64).abs()).collect();
        Ok(Self {
            kind: TaskKind::Ordinal { k },
            loss: LossDecomposition { embed_dim: k, matrix: LossMatrix::Dense { dim: k, data }, offset: 0.0 },
        })
    }

    /// Normalized Hamming loss over sequences of `parts` positions with `states` values each.
    pub fn chain(parts: usize, states: usize) -> Result<Self> {
        if parts < 1 || states < 2 {
            return Err(M4nError::InvalidTask(format!("chain needs parts >= 1 and states >= 2, got ({parts}, {states})")));
        }
        let block: Vec<f64> = (0..states * states).map(|i| if i / states == i % states { 0.0 } else { 1.0 }).collect();
        let layout = Layout::Chain { parts, states };
        Ok(Self {
            kind: TaskKind::Chain { parts, states },
            loss: LossDecomposition {
                embed_dim: layout.dim(),
                matrix: LossMatrix::ChainUnary { parts, states, blocks: vec![block; parts], scale: 1.0 / parts as f64 },
                offset: 0.0,
            },
        })
    }

    /// Fraction of items placed at different positions, `1 - <P, P'> / M`.
    pub fn ranking(items: usize) -> Result<Self> {
        if items < 2 {
            return Err(M4nError::InvalidTask(format!("ranking needs at least 2 items, got {items}")));
        }
        Ok(Self {
            kind: TaskKind::Ranking { items },
            loss: LossDecomposition {
                embed_dim: items * items,
                matrix: LossMatrix::ScaledIdentity { dim: items * items, scale: -1.0 / items as f64 },
                offset: 1.0,
            },
        })
    }

    pub fn from_kind(kind: TaskKind) -> Result<Self> {
        match kind {
            TaskKind::Multiclass { k } => Self::multiclass(k),
            TaskKind::Ordinal { k } => Self::ordinal(k),
            TaskKind::Chain { parts, states } => Self::chain(parts, states),
            TaskKind::Ranking { items } => Self::ranking(items),
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn loss(&self) -> &LossDecomposition {
        &self.loss
    }

    pub fn matrix(&self) -> &LossMatrix {
        &self.loss.matrix
    }

    pub fn offset(&self) -> f64 {
        self.loss.offset
    }

    pub fn embed_dim(&self) -> usize {
        self.loss.embed_dim
    }

    pub fn layout(&self) -> Layout {
        match self.kind {
            TaskKind::Multiclass { k } | TaskKind::Ordinal { k } => Layout::Simplex { k },
            TaskKind::Chain { parts, states } => Layout::Chain { parts, states },
            TaskKind::Ranking { items } => Layout::Birkhoff { items },
        }
    }

    /// `|Y|` as a float (it overflows integers quickly for chains and rankings).
    pub fn num_labels(&self) -> f64 {
        match self.kind {
            TaskKind::Multiclass { k } | TaskKind::Ordinal { k } => k as f64,
            TaskKind::Chain { parts, states } => (states as f64).powi(parts as i32),
            TaskKind::Ranking { items } => (1..=items).map(|i| i as f64).product(),
        }
    }

    /// Per-part loss matrices `L_m` (a single block for flat tasks), unscaled.
    pub fn part_losses(&self) -> Vec<Vec<f64>> {
        match &self.loss.matrix {
            LossMatrix::ChainUnary { blocks, .. } => blocks.clone(),
            m => vec![m.to_dense()],
        }
    }

    /// Spectral norm of the largest part loss (the whole `A` for flat tasks).
    pub fn max_part_spectral_norm(&self) -> f64 {
        match (&self.loss.matrix, self.kind) {
            (LossMatrix::ChainUnary { states, blocks, .. }, _) => {
                blocks.iter().map(|b| spectral_norm(b, *states)).fold(0.0, f64::max)
            }
            (LossMatrix::ScaledIdentity { scale, .. }, _) => scale.abs(),
            (LossMatrix::Dense { dim, data }, _) => spectral_norm(data, *dim),
        }
    }

    /// Largest absolute entry over part losses.
    pub fn max_part_abs_entry(&self) -> f64 {
        self.part_losses().iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()))
    }

    pub fn validate_label(&self, label: &Label) -> Result<()> {
        match (self.kind, label) {
            (TaskKind::Multiclass { k } | TaskKind::Ordinal { k }, Label::Class(c)) => {
                if *c < k {
                    Ok(())
                } else {
                    Err(M4nError::InvalidLabel(format!("class {} out of range 1..={k}", c + 1)))
                }
            }
            (TaskKind::Chain { parts, states }, Label::Sequence(s)) => {
                if s.len() != parts {
                    return Err(M4nError::InvalidLabel(format!("sequence of length {} for a chain of {parts} parts", s.len())));
                }
                if let Some(x) = s.iter().find(|&&x| x >= states) {
                    return Err(M4nError::InvalidLabel(format!("state {} out of range 1..={states}", x + 1)));
                }
                Ok(())
            }
            (TaskKind::Ranking { items }, Label::Permutation(p)) => {
                if p.len() != items {
                    return Err(M4nError::InvalidLabel(format!("permutation of length {} for {items} items", p.len())));
                }
                let mut seen = vec![false; items];
                for &x in p {
                    if x >= items || seen[x] {
                        return Err(M4nError::InvalidLabel(format!("{label} is not a permutation of 1..={items}")));
                    }
                    seen[x] = true;
                }
                Ok(())
            }
            _ => Err(M4nError::InvalidLabel(format!("label {label} does not match task {}", self.kind))),
        }
    }

    /// `phi(y)`.
    pub fn embed(&self, label: &Label) -> Result<Vec<f64>> {
        self.validate_label(label)?;
        let mut e = vec![0.0; self.embed_dim()];
        match (self.kind, label) {
            (_, Label::Class(c)) => e[*c] = 1.0,
            (TaskKind::Chain { parts, states }, Label::Sequence(s)) => {
                for (m, &a) in s.iter().enumerate() {
                    e[Layout::unary_offset(parts, states, m) + a] = 1.0;
                }
                for m in 0..parts - 1 {
                    e[Layout::pair_offset(parts, states, m) + s[m] * states + s[m + 1]] = 1.0;
                }
            }
            (TaskKind::Ranking { items }, Label::Permutation(p)) => {
                for (i, &j) in p.iter().enumerate() {
                    e[i * items + j] = 1.0;
                }
            }
            _ => unreachable!("validated above"),
        }
        Ok(e)
    }

    pub fn vertex_state(&self, label: &Label) -> Result<PolytopeState> {
        Ok(PolytopeState::from_parts_unchecked(self.layout(), self.embed(label)?))
    }

    /// Inverse of [`TaskSpec::embed`] on polytope vertices.
    pub fn decode_embedding(&self, e: &[f64]) -> Result<Label> {
        if e.len() != self.embed_dim() {
            return Err(M4nError::DimensionMismatch { expected: self.embed_dim(), got: e.len() });
        }
        if e.iter().any(|x| (x.abs() > 1e-9) && ((x - 1.0).abs() > 1e-9)) {
            return Err(M4nError::InvalidArgument("not a vertex embedding: entries must be 0 or 1".into()));
        }
        let one_hot = |block: &[f64]| -> Result<usize> {
            let hot: Vec<usize> = block.iter().enumerate().filter(|(_, x)| **x > 0.5).map(|(i, _)| i).collect();
            if hot.len() == 1 {
                Ok(hot[0])
            } else {
                Err(M4nError::InvalidArgument("not a vertex embedding: block is not one-hot".into()))
            }
        };
        let label = match self.kind {
            TaskKind::Multiclass { .. } | TaskKind::Ordinal { .. } => Label::Class(one_hot(e)?),
            TaskKind::Chain { parts, states } => {
                let s = (0..parts).map(|m| one_hot(&e[m * states..(m + 1) * states])).collect::<Result<Vec<_>>>()?;
                Label::Sequence(s)
            }
            TaskKind::Ranking { items } => {
                let p = (0..items).map(|i| one_hot(&e[i * items..(i + 1) * items])).collect::<Result<Vec<_>>>()?;
                Label::Permutation(p)
            }
        };
        if self.embed(&label)? != e.iter().map(|x| x.round()).collect::<Vec<_>>() {
            return Err(M4nError::InvalidArgument("not a vertex embedding: inconsistent blocks".into()));
        }
        Ok(label)
    }

    /// `phi(y)^T v` without materializing `phi(y)`.
    pub fn score(&self, label: &Label, v: &[f64]) -> f64 {
        match (self.kind, label) {
            (_, Label::Class(c)) => v[*c],
            (TaskKind::Chain { parts, states }, Label::Sequence(s)) => {
                let unary: f64 = s.iter().enumerate().map(|(m, &a)| v[m * states + a]).sum();
                let pair: f64 =
                    (0..parts - 1).map(|m| v[Layout::pair_offset(parts, states, m) + s[m] * states + s[m + 1]]).sum();
                unary + pair
            }
            (TaskKind::Ranking { items }, Label::Permutation(p)) => p.iter().enumerate().map(|(i, &j)| v[i * items + j]).sum(),
            _ => f64::NAN,
        }
    }

    /// `L(y, y2) = phi(y)^T A phi(y2) + a`.
    pub fn loss_eval(&self, y: &Label, y2: &Label) -> Result<f64> {
        let e1 = self.embed(y)?;
        let e2 = self.embed(y2)?;
        Ok(self.loss.matrix.bilinear(&e1, &e2) + self.loss.offset)
    }

    /// `argmax_y phi(y)^T v`, ties to the lexicographically smallest label.
    pub fn decode(&self, v: &[f64]) -> Result<Label> {
        if v.len() != self.embed_dim() {
            return Err(M4nError::DimensionMismatch { expected: self.embed_dim(), got: v.len() });
        }
        check_finite(v, "decode scores")?;
        Ok(match self.kind {
            TaskKind::Multiclass { .. } | TaskKind::Ordinal { .. } => {
                let mut best = 0;
                for (i, x) in v.iter().enumerate() {
                    if *x > v[best] {
                        best = i;
                    }
                }
                Label::Class(best)
            }
            TaskKind::Chain { parts, states } => Label::Sequence(viterbi::viterbi(v, parts, states)),
            TaskKind::Ranking { items } => Label::Permutation(hungarian::max_score_permutation(v, items)),
        })
    }

    /// `(max_y phi(y)^T v, argmax)`.
    pub fn max_vertex(&self, v: &[f64]) -> Result<(f64, Label)> {
        let y = self.decode(v)?;
        Ok((self.score(&y, v), y))
    }

    /// Bayes risk `min_y phi(y)^T A mu` (centered) and a minimizer.
    pub fn bayes_risk(&self, mu: &PolytopeState) -> Result<(f64, Label)> {
        mu.expect_layout(self.layout())?;
        let a_mu = self.loss.matrix.apply(mu.values());
        let neg: Vec<f64> = a_mu.iter().map(|x| -x).collect();
        let y = self.decode(&neg)?;
        Ok((self.score(&y, &a_mu), y))
    }

    /// Loss-augmented decoding `argmax_y' phi(y)^T A phi(y') + v^T phi(y')`.
    pub fn loss_augmented_decode(&self, y: &Label, v: &[f64]) -> Result<Label> {
        let phi = self.embed(y)?;
        let aug = self.loss.matrix.apply_transpose(&phi);
        let scores: Vec<f64> = v.iter().zip(&aug).map(|(a, b)| a + b).collect();
        self.decode(&scores)
    }

    /// All labels in lexicographic order; refuses output spaces above `limit`.
    pub fn enumerate_labels(&self, limit: usize) -> Result<Vec<Label>> {
        if self.num_labels() > limit as f64 {
            return Err(M4nError::InvalidArgument(format!(
                "task {} has {} labels, above the enumeration limit {limit}",
                self.kind,
                self.num_labels()
            )));
        }
        Ok(match self.kind {
            TaskKind::Multiclass { k } | TaskKind::Ordinal { k } => (0..k).map(Label::Class).collect(),
            TaskKind::Chain { parts, states } => {
                let total = states.pow(parts as u32);
                (0..total)
                    .map(|mut idx| {
                        let mut s = vec![0; parts];
                        for m in (0..parts).rev() {
                            s[m] = idx % states;
                            idx /= states;
                        }
                        Label::Sequence(s)
                    })
                    .collect()
            }
            TaskKind::Ranking { items } => {
                let mut out = Vec::new();
                let mut p: Vec<usize> = (0..items).collect();
                loop {
                    out.push(Label::Permutation(p.clone()));
                    if !next_permutation(&mut p) {
                        break;
                    }
                }
                out
            }
        })
    }
}

/// Advances `p` to the next permutation in lexicographic order; false at the last one.
pub(crate) fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiclass_embedding_is_one_hot() {
        let t = TaskSpec::multiclass(3).unwrap();
        assert_eq!(t.embed(&Label::Class(1)).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn chain_embedding_layout() {
        let t = TaskSpec::chain(2, 2).unwrap();
        let e = t.embed(&Label::Sequence(vec![0, 1])).unwrap();
        assert_eq!(e, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_labels() {
        let t = TaskSpec::ranking(3).unwrap();
        assert!(t.embed(&Label::Permutation(vec![0, 0, 1])).is_err());
        assert!(TaskSpec::multiclass(3).unwrap().embed(&Label::Class(3)).is_err());
    }

    #[test]
    fn next_permutation_counts() {
        let mut p = vec![0, 1, 2, 3];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 24);
    }

    #[test]
    fn decode_breaks_ties_low() {
        let t = TaskSpec::multiclass(3).unwrap();
        assert_eq!(t.decode(&[1.0, 1.0, 0.0]).unwrap(), Label::Class(0));
        assert!(t.decode(&[f64::NAN, 0.0, 0.0]).is_err());
    }
}
