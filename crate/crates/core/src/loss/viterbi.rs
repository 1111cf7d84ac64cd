//! Max-sum decoding on a chain with unary and adjacent pairwise scores.

use super::polytope::Layout;

fn tie_tol(scale: f64) -> f64 {
    1e-12 * (1.0 + scale.abs())
}

/// Returns the highest-scoring state sequence for a chain-layout score vector,
/// breaking ties towards the lexicographically smallest sequence.
pub fn viterbi(v: &[f64], parts: usize, states: usize) -> Vec<usize> {
    let r = states;
    let unary = |m: usize, a: usize| v[Layout::unary_offset(parts, r, m) + a];
    let pair = |m: usize, a: usize, b: usize| v[Layout::pair_offset(parts, r, m) + a * r + b];

    // best[m][a]: best score of positions m.. given y_m = a
    let mut best = vec![0.0; parts * r];
    for a in 0..r {
        best[(parts - 1) * r + a] = unary(parts - 1, a);
    }
    for m in (0..parts - 1).rev() {
        for a in 0..r {
            let tail = (0..r)
                .map(|b| pair(m, a, b) + best[(m + 1) * r + b])
                .fold(f64::NEG_INFINITY, f64::max);
            best[m * r + a] = unary(m, a) + tail;
        }
    }

    let mut seq = Vec::with_capacity(parts);
    let top = best[..r].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first = (0..r).find(|&a| best[a] >= top - tie_tol(top)).unwrap_or(0);
    seq.push(first);
    for m in 0..parts - 1 {
        let a = seq[m];
        let target = best[m * r + a] - unary(m, a);
        let next = (0..r)
            .find(|&b| pair(m, a, b) + best[(m + 1) * r + b] >= target - tie_tol(target))
            .unwrap_or(0);
        seq.push(next);
    }
    seq
}
