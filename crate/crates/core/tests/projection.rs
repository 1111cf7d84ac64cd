use m4n::projection::{
    chain_marginals, project_birkhoff_sinkhorn, project_chain_entropic, project_simplex_entropic, sinkhorn_with_trace, spmp_constants,
};
use m4n::{Layout, PolytopeState, SinkhornOptions, TaskSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Objective minimized by the entropic step: `-eta g.mu + KL(mu || prev)`.
fn bregman_objective(mu: &[f64], prev: &[f64], g: &[f64], eta: f64) -> f64 {
    -eta * mu.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() + kl(mu, prev)
}

fn random_simplex(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

#[test]
fn simplex_examples() {
    let p = project_simplex_entropic(&[0.5, 0.5], &[3f64.ln(), 0.0], 1.0).unwrap();
    assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
    let u = project_simplex_entropic(&[0.25; 4], &[0.7; 4], 3.0).unwrap();
    assert!(u.iter().all(|x| (x - 0.25).abs() < 1e-15));
    assert!(project_simplex_entropic(&[0.5, 0.5], &[f64::INFINITY, 0.0], 1.0).is_err());
    assert!(project_simplex_entropic(&[0.5, 0.5], &[0.0, 0.0], 0.0).is_err());
}

#[test]
fn simplex_step_minimizes_bregman_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let k = rng.random_range(2..8);
        let prev = random_simplex(&mut rng, k);
        let g: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let eta = rng.random_range(0.05..3.0);
        let p = project_simplex_entropic(&prev, &g, eta).unwrap();
        let f = bregman_objective(&p, &prev, &g, eta);
        // independent numeric minimizer: mirror descent on the objective itself
        let mut q = vec![1.0 / k as f64; k];
        for _ in 0..4000 {
            let grad: Vec<f64> = q.iter().zip(&prev).zip(&g).map(|((a, b), c)| -eta * c + (a / b).ln() + 1.0).collect();
            let mut logits: Vec<f64> = q.iter().zip(&grad).map(|(a, d)| a.ln() - 0.5 * d).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            logits.iter_mut().for_each(|x| *x = (*x - m).exp());
            let s: f64 = logits.iter().sum();
            q = logits.into_iter().map(|x| x / s).collect();
        }
        assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-6), "{p:?} vs {q:?}");
        assert!(f <= bregman_objective(&q, &prev, &g, eta) + 1e-12);
    }
}

fn enumerate_sequences(parts: usize, states: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..parts {
        out = out.into_iter().flat_map(|s| (0..states).map(move |a| [s.clone(), vec![a]].concat())).collect();
    }
    out
}

/// Marginals of `p(y) ∝ exp(theta . phi(y))` by summing over every sequence.
fn brute_marginals(theta: &[f64], parts: usize, states: usize) -> Vec<f64> {
    let task = TaskSpec::chain(parts, states).unwrap();
    let seqs = enumerate_sequences(parts, states);
    let phis: Vec<Vec<f64>> = seqs.iter().map(|s| task.embed(&m4n::Label::Sequence(s.clone())).unwrap()).collect();
    let scores: Vec<f64> = phis.iter().map(|p| p.iter().zip(theta).map(|(a, b)| a * b).sum()).collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; task.embed_dim()];
    for (wi, p) in w.iter().zip(&phis) {
        for (o, x) in out.iter_mut().zip(p) {
            *o += wi / z * x;
        }
    }
    out
}

#[test]
fn chain_marginals_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let parts = rng.random_range(1..5);
        let states = rng.random_range(2..4);
        let dim = Layout::Chain { parts, states }.dim();
        let theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (unary, pair) = theta.split_at(parts * states);
        let got = chain_marginals(unary, pair, parts, states);
        let want = brute_marginals(&theta, parts, states);
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9), "{got:?} vs {want:?}");
    }
}

#[test]
fn chain_projection_is_gibbs_reweighting() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let parts = rng.random_range(1..5);
        let states = rng.random_range(2..4);
        let layout = Layout::Chain { parts, states };
        let theta: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let g: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eta = rng.random_range(0.1..2.0);
        let prev = PolytopeState::new(layout, brute_marginals(&theta, parts, states)).unwrap();
        let got = project_chain_entropic(&prev, &g, eta).unwrap();
        let shifted: Vec<f64> = theta.iter().zip(&g).map(|(t, d)| t + eta * d).collect();
        let want = brute_marginals(&shifted, parts, states);
        assert!(got.values().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9));
        let v = got.values();
        for m in 0..parts.saturating_sub(1) {
            let o = Layout::pair_offset(parts, states, m);
            for a in 0..states {
                let row: f64 = (0..states).map(|b| v[o + a * states + b]).sum();
                let col: f64 = (0..states).map(|b| v[o + b * states + a]).sum();
                assert!((row - v[m * states + a]).abs() < 1e-8);
                assert!((col - v[(m + 1) * states + a]).abs() < 1e-8);
            }
        }
    }
}

fn birkhoff(items: usize, values: Vec<f64>) -> PolytopeState {
    PolytopeState::new(Layout::Birkhoff { items }, values).unwrap()
}

fn max_marginal_error(q: &[f64], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| q[i * n + j]).sum();
        let col: f64 = (0..n).map(|j| q[j * n + i]).sum();
        worst = worst.max((row - 1.0).abs()).max((col - 1.0).abs());
    }
    worst
}

#[test]
fn sinkhorn_examples() {
    let u = birkhoff(4, vec![0.25; 16]);
    let q = project_birkhoff_sinkhorn(&u, &[0.0; 16], 1.0, SinkhornOptions::default()).unwrap();
    assert!(q.values().iter().all(|x| (x - 0.25).abs() < 1e-12));

    let u3 = birkhoff(3, vec![1.0 / 3.0; 9]);
    let g: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 10.0 } else { 0.0 }).collect();
    let q = project_birkhoff_sinkhorn(&u3, &g, 1.0, SinkhornOptions::default()).unwrap();
    let off: f64 = (0..9).filter(|i| i % 4 != 0).map(|i| q.values()[i]).sum();
    assert!(off < 0.05, "off-diagonal mass {off}");
}

#[test]
fn sinkhorn_is_doubly_stochastic_with_nonincreasing_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let u = birkhoff(4, vec![0.25; 16]);
    for _ in 0..200 {
        let g: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let out = sinkhorn_with_trace(&u, &g, 1.0, SinkhornOptions::default()).unwrap();
        assert!(max_marginal_error(out.state.values(), 4) < 1e-9);
        assert!(out.state.values().iter().all(|x| *x >= 0.0));
        for w in out.trace.iter().step_by(10).collect::<Vec<_>>().windows(2) {
            assert!(*w[1] <= *w[0] + 1e-15, "residual went up: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn sinkhorn_rejects_bad_inputs() {
    let u = birkhoff(3, vec![1.0 / 3.0; 9]);
    assert!(project_birkhoff_sinkhorn(&u, &[0.0; 4], 1.0, SinkhornOptions::default()).is_err());
    let mut g = vec![0.0; 9];
    g[2] = f64::NAN;
    assert!(project_birkhoff_sinkhorn(&u, &g, 1.0, SinkhornOptions::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// The projected state's alignment with the gradient grows with the step.
    #[test]
    fn alignment_is_monotone_in_step(g in prop::collection::vec(-2.0f64..2.0, 16), e1 in 0.01f64..2.0, de in 0.01f64..2.0) {
        let dot = |v: &[f64], w: &[f64]| v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        let prev = vec![0.2; 5];
        let a = project_simplex_entropic(&prev, &g[..5], e1).unwrap();
        let b = project_simplex_entropic(&prev, &g[..5], e1 + de).unwrap();
        prop_assert!(dot(&b, &g[..5]) >= dot(&a, &g[..5]) - 1e-12);

        let chain = PolytopeState::uniform(Layout::Chain { parts: 2, states: 2 });
        let gc = &g[..chain.dim()];
        let a = project_chain_entropic(&chain, gc, e1).unwrap();
        let b = project_chain_entropic(&chain, gc, e1 + de).unwrap();
        prop_assert!(b.dot(gc) >= a.dot(gc) - 1e-10);

        let u = birkhoff(4, vec![0.25; 16]);
        let a = project_birkhoff_sinkhorn(&u, &g, e1, SinkhornOptions::default()).unwrap();
        let b = project_birkhoff_sinkhorn(&u, &g, e1 + de, SinkhornOptions::default()).unwrap();
        prop_assert!(b.dot(&g) >= a.dot(&g) - 1e-7);
    }
}

#[test]
fn mirror_map_constants() {
    assert_eq!(spmp_constants(&TaskSpec::ranking(5).unwrap()).l_spmp, 5.0);
    let one_part = spmp_constants(&TaskSpec::chain(1, 2).unwrap());
    assert!((one_part.l_spmp - 2.0 * 2f64.ln()).abs() < 1e-12);
    let mm = spmp_constants(&TaskSpec::multiclass(4).unwrap());
    assert!((mm.default_eta() - 0.5 / mm.l_spmp).abs() < 1e-15);
}
