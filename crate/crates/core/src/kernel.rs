//! Scalar kernels shared across output coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{M4nError, Result};

/// Largest subsample used by [`median_heuristic`].
pub const MEDIAN_SUBSAMPLE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `exp(-gamma * |x - y|^2)`.
    Gaussian { gamma: f64 },
    /// `x^T y`, mostly for debugging.
    Linear,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(M4nError::Kernel(format!("gaussian width must be positive and finite, got {gamma}")))
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { gamma } => (-gamma * squared_distance(x, y)).exp(),
            KernelSpec::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        }
    }
}

pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_inputs(xs: &[Vec<f64>], dim: Option<usize>) -> Result<usize> {
    let d = dim.or_else(|| xs.first().map(|x| x.len())).unwrap_or(0);
    for (i, x) in xs.iter().enumerate() {
        if x.len() != d {
            return Err(M4nError::Kernel(format!("input {i} has {} features, expected {d}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(M4nError::Kernel(format!("input {i} has non-finite features")));
        }
    }
    Ok(d)
}

/// Row-major `n x n` Gram matrix, built row-parallel.
pub fn gram(xs: &[Vec<f64>], spec: &KernelSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    check_inputs(xs, None)?;
    let n = xs.len();
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        for (j, r) in row.iter_mut().enumerate() {
            // evaluate each pair in a fixed argument order so the matrix is exactly symmetric
            *r = if i <= j { spec.eval(&xs[i], &xs[j]) } else { spec.eval(&xs[j], &xs[i]) };
        }
    });
    Ok(out)
}

/// Row-major `m x n` matrix of `k(queries[a], xs[b])`.
pub fn cross_gram(queries: &[Vec<f64>], xs: &[Vec<f64>], spec: &KernelSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let d = check_inputs(xs, None)?;
    check_inputs(queries, Some(d))?;
    let n = xs.len();
    let mut out = vec![0.0; queries.len() * n];
    out.par_chunks_mut(n.max(1)).zip(queries.par_iter()).for_each(|(row, q)| {
        for (r, x) in row.iter_mut().zip(xs) {
            *r = spec.eval(q, x);
        }
    });
    Ok(out)
}

/// `1 / median(pairwise squared distances)` over a seeded subsample of at most
/// [`MEDIAN_SUBSAMPLE`] points.
pub fn median_heuristic(xs: &[Vec<f64>], seed: u64) -> Result<f64> {
    if xs.len() < 2 {
        return Err(M4nError::Kernel("median heuristic needs at least 2 points".into()));
    }
    check_inputs(xs, None)?;
    let picked: Vec<&Vec<f64>> = if xs.len() > MEDIAN_SUBSAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, xs.len(), MEDIAN_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &xs[i]).collect()
    } else {
        xs.iter().collect()
    };
    let mut dists = Vec::with_capacity(picked.len() * (picked.len() - 1) / 2);
    for i in 0..picked.len() {
        for j in i + 1..picked.len() {
            dists.push(squared_distance(picked[i], picked[j]));
        }
    }
    let mut positive: Vec<f64> = dists.iter().copied().filter(|d| *d > 0.0).collect();
    if positive.is_empty() {
        return Err(M4nError::Kernel("all points are identical; pass an explicit kernel width instead".into()));
    }
    let mut median = median_of(&mut dists);
    if median <= 0.0 {
        // mostly duplicated points: fall back to distinct pairs only
        median = median_of(&mut positive);
    }
    Ok(1.0 / median)
}

fn median_of(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
