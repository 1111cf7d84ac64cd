//! Linear assignment on small dense score matrices.

/// Minimum-cost perfect matching for a square row-major cost matrix.
/// Returns `(cost, assignment)` with `assignment[row] = col`.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> (f64, Vec<usize>) {
    debug_assert_eq!(cost.len(), n * n);
    if n == 0 {
        return (0.0, Vec::new());
    }
    // potentials and matching use 1-based indexing, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[i * n + assignment[i]]).sum();
    (total, assignment)
}

fn max_score(score: &[f64], full: usize, rows: &[usize], cols: &[usize]) -> f64 {
    let n = rows.len();
    let mut cost = Vec::with_capacity(n * n);
    for &i in rows {
        for &j in cols {
            cost.push(-score[i * full + j]);
        }
    }
    -min_cost_assignment(&cost, n).0
}

/// Maximum-score permutation `sigma` (row `i` matched to column `sigma[i]`),
/// lexicographically smallest among optimal ones.
pub fn max_score_permutation(score: &[f64], n: usize) -> Vec<usize> {
    let all: Vec<usize> = (0..n).collect();
    let opt = max_score(score, n, &all, &all);
    let tol = 1e-12 * (1.0 + opt.abs()) * n as f64;
    let mut sigma = Vec::with_capacity(n);
    let mut fixed = 0.0;
    let mut free_cols: Vec<usize> = all.clone();
    for i in 0..n {
        let rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (pos, &j) in free_cols.iter().enumerate() {
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            let value = fixed + score[i * n + j] + max_score(score, n, &rows, &cols);
            if value >= opt - tol {
                chosen = Some(pos);
                break;
            }
        }
        // rounding can in principle reject every column; fall back to the best one
        let pos = chosen.unwrap_or_else(|| {
            let rows_all: Vec<usize> = (i + 1..n).collect();
            let mut best = (f64::NEG_INFINITY, 0);
            for (pos, &j) in free_cols.iter().enumerate() {
                let cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
                let value = score[i * n + j] + max_score(score, n, &rows_all, &cols);
                if value > best.0 {
                    best = (value, pos);
                }
            }
            best.1
        });
        let j = free_cols.remove(pos);
        fixed += score[i * n + j];
        sigma.push(j);
    }
    sigma
}
