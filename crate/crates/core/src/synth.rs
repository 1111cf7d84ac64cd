//! Synthetic datasets with known Bayes predictors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{M4nError, Result};
use crate::loss::hungarian::max_score_permutation;
use crate::loss::{Label, TaskSpec};
use crate::projection::chain_marginals;

/// Monte Carlo draws per point for the ranking Bayes predictor.
const RANKING_BAYES_DRAWS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthKind {
    /// Unit-variance Gaussian classes with means on a circle of radius `separation`, uniform priors.
    Blobs { k: usize, n: usize, separation: f64, dim: usize },
    /// Uniform features, labels drawn from `probs` regardless of the input.
    FlatNoise { probs: Vec<f64>, n: usize, dim: usize },
    /// Gaussian features, thresholded noisy linear score.
    Ordinal { k: usize, n: usize, dim: usize, noise: f64 },
    /// Hidden Markov chain with sticky transitions and Gaussian emissions around `separation * e_state`.
    Hmm { parts: usize, states: usize, n: usize, stay: f64, separation: f64 },
    /// Items ordered by noisy linear scores of the input.
    Rankings { items: usize, n: usize, dim: usize, noise: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub task: TaskSpec,
    /// Bayes-optimal label of every generated input.
    pub bayes: Vec<Label>,
    /// Bayes risk when it is available in closed form or by quadrature.
    pub bayes_error: Option<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn invalid(msg: impl Into<String>) -> M4nError {
    M4nError::InvalidArgument(msg.into())
}

pub fn synth_generate(kind: &SynthKind, seed: u64) -> Result<SynthOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SynthKind::Blobs { k, n, separation, dim } => blobs(*k, *n, *separation, *dim, &mut rng),
        SynthKind::FlatNoise { probs, n, dim } => flat_noise(probs, *n, *dim, &mut rng),
        SynthKind::Ordinal { k, n, dim, noise } => ordinal(*k, *n, *dim, *noise, &mut rng),
        SynthKind::Hmm { parts, states, n, stay, separation } => hmm(*parts, *states, *n, *stay, *separation, &mut rng),
        SynthKind::Rankings { items, n, dim, noise } => rankings(*items, *n, *dim, *noise, &mut rng),
    }
}

/// Class means of the blob mixture (only the first two coordinates are non-zero).
pub fn blob_means(k: usize, separation: f64, dim: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let mut m = vec![0.0; dim];
            if dim == 1 {
                m[0] = separation * (c as f64 - (k as f64 - 1.0) / 2.0);
            } else {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                m[0] = separation * angle.cos();
                m[1] = separation * angle.sin();
            }
            m
        })
        .collect()
}

fn nearest(means: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, m) in means.iter().enumerate() {
        let d: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        // strict comparison keeps the lowest class on ties
        if d < best.0 - 1e-12 {
            best = (d, c);
        }
    }
    best.1
}

/// Bayes 0-1 risk of the blob mixture by quadrature over the plane spanned by the means.
pub fn blob_bayes_error(k: usize, separation: f64, dim: usize) -> f64 {
    let means = blob_means(k, separation, dim);
    let reach = separation.abs() * (k as f64) + 8.0;
    let density = |d2: f64, dims: i32| (-0.5 * d2).exp() / (2.0 * std::f64::consts::PI).powf(dims as f64 / 2.0);
    let mut mass = 0.0;
    if dim == 1 {
        let h = 1e-3;
        let steps = (2.0 * reach / h) as usize;
        for s in 0..steps {
            let x = -reach + (s as f64 + 0.5) * h;
            let best = means.iter().map(|m| density((x - m[0]).powi(2), 1)).fold(0.0, f64::max);
            mass += best * h;
        }
    } else {
        let h = 0.02;
        let steps = (2.0 * reach / h) as usize;
        for s in 0..steps {
            let x = -reach + (s as f64 + 0.5) * h;
            for u in 0..steps {
                let y = -reach + (u as f64 + 0.5) * h;
                let best = means.iter().map(|m| density((x - m[0]).powi(2) + (y - m[1]).powi(2), 2)).fold(0.0, f64::max);
                mass += best * h * h;
            }
        }
    }
    (1.0 - mass / k as f64).clamp(0.0, 1.0)
}

fn blobs(k: usize, n: usize, separation: f64, dim: usize, rng: &mut ChaCha8Rng) -> Result<SynthOutput> {
    if k < 2 || n == 0 || dim == 0 || !separation.is_finite() || separation < 0.0 {
        return Err(invalid("blobs need k >= 2, n >= 1, dim >= 1 and a finite separation >= 0"));
    }
    let means = blob_means(k, separation, dim);
    let mut ds = Dataset::default();
    let mut bayes = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..k);
        let x: Vec<f64> = means[c].iter().map(|m| m + normal(rng)).collect();
        bayes.push(Label::Class(nearest(&means, &x)));
        ds.inputs.push(x);
        ds.labels.push(Label::Class(c));
    }
    Ok(SynthOutput { dataset: ds, task: TaskSpec::multiclass(k)?, bayes, bayes_error: Some(blob_bayes_error(k, separation, dim)) })
}

fn flat_noise(probs: &[f64], n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<SynthOutput> {
    let total: f64 = probs.iter().sum();
    if probs.len() < 2 || probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 || n == 0 || dim == 0 {
        return Err(invalid("flat noise needs at least two nonnegative probabilities summing to 1, n >= 1, dim >= 1"));
    }
    let mut best = 0;
    for (c, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = c;
        }
    }
    let mut ds = Dataset::default();
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut c = probs.len() - 1;
        for (j, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                c = j;
                break;
            }
        }
        ds.inputs.push(x);
        ds.labels.push(Label::Class(c));
    }
    Ok(SynthOutput {
        dataset: ds,
        task: TaskSpec::multiclass(probs.len())?,
        bayes: vec![Label::Class(best); n],
        bayes_error: Some(1.0 - probs[best]),
    })
}

fn ordinal(k: usize, n: usize, dim: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<SynthOutput> {
    if k < 2 || n == 0 || dim == 0 || !(noise >= 0.0) {
        return Err(invalid("ordinal data needs k >= 2, n >= 1, dim >= 1 and noise >= 0"));
    }
    let thresholds: Vec<f64> = (1..k).map(|j| -2.0 + 4.0 * j as f64 / k as f64).collect();
    let bucket = |z: f64| thresholds.iter().filter(|c| **c < z).count();
    let mut ds = Dataset::default();
    let mut bayes = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let s = 2.0 * x.iter().sum::<f64>() / (dim as f64).sqrt();
        let z = s + noise * normal(rng);
        // the conditional median of the label is the bucket of the noiseless score
        bayes.push(Label::Class(bucket(s)));
        ds.inputs.push(x);
        ds.labels.push(Label::Class(bucket(z)));
    }
    Ok(SynthOutput { dataset: ds, task: TaskSpec::ordinal(k)?, bayes, bayes_error: None })
}

fn hmm(parts: usize, states: usize, n: usize, stay: f64, separation: f64, rng: &mut ChaCha8Rng) -> Result<SynthOutput> {
    if parts == 0 || states < 2 || n == 0 || !(0.0..=1.0).contains(&stay) {
        return Err(invalid("hmm data needs parts >= 1, states >= 2, n >= 1 and stay in [0, 1]"));
    }
    let r = states;
    let switch = (1.0 - stay) / (r - 1) as f64;
    let trans = |a: usize, b: usize| if a == b { stay } else { switch };
    let mut ds = Dataset::default();
    let mut bayes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut seq = Vec::with_capacity(parts);
        let mut cur = rng.random_range(0..r);
        for m in 0..parts {
            if m > 0 {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut next = r - 1;
                for b in 0..r {
                    acc += trans(cur, b);
                    if u < acc {
                        next = b;
                        break;
                    }
                }
                cur = next;
            }
            seq.push(cur);
        }
        let mut x = Vec::with_capacity(parts * r);
        for &a in &seq {
            for j in 0..r {
                x.push(if j == a { separation } else { 0.0 } + normal(rng));
            }
        }
        let mut unary = vec![0.0; parts * r];
        for m in 0..parts {
            for a in 0..r {
                let d2: f64 = (0..r).map(|j| (x[m * r + j] - if j == a { separation } else { 0.0 }).powi(2)).sum();
                unary[m * r + a] = -0.5 * d2;
            }
        }
        let pair: Vec<f64> = (0..parts.saturating_sub(1) * r * r).map(|idx| trans((idx / r) % r, idx % r).max(1e-300).ln()).collect();
        let marg = chain_marginals(&unary, &pair, parts, r);
        let post: Vec<usize> = (0..parts)
            .map(|m| {
                let block = &marg[m * r..(m + 1) * r];
                let mut best = 0;
                for (a, p) in block.iter().enumerate() {
                    if *p > block[best] + 1e-12 {
                        best = a;
                    }
                }
                best
            })
            .collect();
        bayes.push(Label::Sequence(post));
        ds.inputs.push(x);
        ds.labels.push(Label::Sequence(seq));
    }
    Ok(SynthOutput { dataset: ds, task: TaskSpec::chain(parts, states)?, bayes, bayes_error: None })
}

fn positions(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut pos = vec![0; scores.len()];
    for (p, &item) in order.iter().enumerate() {
        pos[item] = p;
    }
    pos
}

fn rankings(items: usize, n: usize, dim: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<SynthOutput> {
    if items < 2 || n == 0 || dim == 0 || !(noise >= 0.0) {
        return Err(invalid("rankings need items >= 2, n >= 1, dim >= 1 and noise >= 0"));
    }
    let w: Vec<Vec<f64>> = (0..items).map(|_| (0..dim).map(|_| normal(rng)).collect()).collect();
    let mut ds = Dataset::default();
    let mut bayes = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let s: Vec<f64> = w.iter().map(|wj| wj.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        let noisy: Vec<f64> = s.iter().map(|v| v + noise * normal(rng)).collect();
        // Monte Carlo estimate of the position marginals, then the best assignment
        let mut marg = vec![0.0; items * items];
        for _ in 0..RANKING_BAYES_DRAWS {
            let draw: Vec<f64> = s.iter().map(|v| v + noise * normal(rng)).collect();
            for (i, p) in positions(&draw).into_iter().enumerate() {
                marg[i * items + p] += 1.0;
            }
        }
        bayes.push(Label::Permutation(max_score_permutation(&marg, items)));
        ds.inputs.push(x);
        ds.labels.push(Label::Permutation(positions(&noisy)));
    }
    Ok(SynthOutput { dataset: ds, task: TaskSpec::ranking(items)?, bayes, bayes_error: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_noise_bayes_is_constant() {
        let out = synth_generate(&SynthKind::FlatNoise { probs: vec![0.4, 0.35, 0.25], n: 50, dim: 2 }, 3).unwrap();
        assert!(out.bayes.iter().all(|y| *y == Label::Class(0)));
        assert!((out.bayes_error.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_data() {
        let kind = SynthKind::Ordinal { k: 4, n: 30, dim: 3, noise: 0.5 };
        assert_eq!(synth_generate(&kind, 9).unwrap(), synth_generate(&kind, 9).unwrap());
    }
}
