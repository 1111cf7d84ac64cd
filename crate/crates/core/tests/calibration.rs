use m4n::calibration::{constant_c_sampled, excess_risks};
use m4n::{constant_c, ranking_d_bound, zeta_bruteforce, Label, PolytopeState, SearchBudget, TaskSpec};

const EPS: [f64; 3] = [0.1, 0.3, 0.5];

fn budget(seed: u64) -> SearchBudget {
    SearchBudget { samples: 20_000, refine_steps: 500, spmp_iters: 2000, v_scale: 2.0, seed }
}

/// `max_{mu in simplex} (1 - max_j mu_j) + v^T mu` on a grid of step `1/steps`.
fn multiclass3_omega_grid(v: &[f64], steps: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for a in 0..=steps {
        for b in 0..=steps - a {
            let mu = [a as f64 / steps as f64, b as f64 / steps as f64, (steps - a - b) as f64 / steps as f64];
            let top = mu.iter().cloned().fold(0.0, f64::max);
            best = best.max(1.0 - top + mu.iter().zip(v).map(|(m, x)| m * x).sum::<f64>());
        }
    }
    best
}

#[test]
fn constant_c_examples() {
    assert_eq!(constant_c(&TaskSpec::multiclass(4).unwrap()).unwrap(), 4.0);
    assert_eq!(constant_c(&TaskSpec::multiclass(2).unwrap()).unwrap(), 2.0);
    assert_eq!(constant_c(&TaskSpec::chain(2, 2).unwrap()).unwrap(), 2.0);
    assert_eq!(constant_c(&TaskSpec::ordinal(3).unwrap()).unwrap(), f64::INFINITY);
}

#[test]
fn sampled_constant_never_exceeds_exact() {
    for task in [TaskSpec::multiclass(3).unwrap(), TaskSpec::multiclass(5).unwrap(), TaskSpec::ordinal(4).unwrap(), TaskSpec::ranking(3).unwrap()] {
        let exact = constant_c(&task).unwrap();
        let sampled = constant_c_sampled(&task, 2000, 1).unwrap();
        assert!(sampled <= exact + 1e-9, "{task:?}: sampled {sampled} exact {exact}");
    }
    // every subset-uniform distribution is visited, so the multiclass worst case is hit exactly
    assert!((constant_c_sampled(&TaskSpec::multiclass(5).unwrap(), 0, 0).unwrap() - 5.0).abs() < 1e-9);
}

fn check_estimate(task: &TaskSpec, floor: impl Fn(f64) -> f64) {
    let est = zeta_bruteforce(task, &EPS, &budget(3)).unwrap();
    for ((eps, zeta), witness) in EPS.iter().zip(&est.zeta_lower).zip(&est.witnesses) {
        assert!(*zeta > 0.0);
        assert!(*zeta >= floor(*eps), "{task:?} eps {eps}: zeta {zeta} below {}", floor(*eps));
        let w = witness.as_ref().expect("feasible pair found");
        assert!(w.delta_loss >= eps - 1e-12);
        assert!((w.delta_surrogate - zeta).abs() < 1e-12);
        let mu = PolytopeState::new(task.layout(), w.mu.clone()).unwrap();
        let (dl, ds, decoded) = excess_risks(task, &w.v, &mu, 2000).unwrap();
        assert_eq!(decoded, w.decoded);
        assert!((dl - w.delta_loss).abs() < 1e-9 && (ds - w.delta_surrogate).abs() < 1e-9);
    }
    for pair in est.zeta_lower.windows(2) {
        assert!(pair[1] >= pair[0] - 1e-12, "estimates not monotone: {:?}", est.zeta_lower);
    }
}

#[test]
fn multiclass_zeta_respects_lower_bound() {
    check_estimate(&TaskSpec::multiclass(3).unwrap(), |e| e / 3.0 - 0.02 * e);
}

#[test]
fn binary_zeta_respects_lower_bound() {
    check_estimate(&TaskSpec::binary(), |e| e / 2.0 - 0.02);
}

#[test]
fn ordinal_zeta_is_positive() {
    let task = TaskSpec::ordinal(3).unwrap();
    let c = constant_c(&task).unwrap();
    check_estimate(&task, |e| e / c - 0.02 * e);
}

#[test]
fn multiclass_witness_surrogate_matches_grid_search() {
    let task = TaskSpec::multiclass(3).unwrap();
    let est = zeta_bruteforce(&task, &EPS, &budget(5)).unwrap();
    for w in est.witnesses.iter().flatten() {
        let bayes = 1.0 - w.mu.iter().cloned().fold(0.0, f64::max);
        let ds = multiclass3_omega_grid(&w.v, 600) - w.mu.iter().zip(&w.v).map(|(m, x)| m * x).sum::<f64>() - bayes;
        // the grid only sees a subset of the simplex, so it can only come in low
        assert!(ds <= w.delta_surrogate + 1e-12 && w.delta_surrogate - ds < 0.02);
    }
}

#[test]
fn chain_estimate_uses_saddle_upper_values() {
    // a single-part chain keeps the search space small while going through the saddle solver
    let task = TaskSpec::chain(1, 3).unwrap();
    let est = zeta_bruteforce(&task, &[0.25], &SearchBudget { samples: 1500, refine_steps: 50, spmp_iters: 300, v_scale: 2.0, seed: 2 }).unwrap();
    let c = constant_c(&task).unwrap();
    assert!(est.zeta_lower[0] >= 0.25 / c - 0.02 * 0.25);
    assert_eq!(est.constant_c, c);
}

#[test]
fn search_rejects_bad_arguments() {
    assert!(zeta_bruteforce(&TaskSpec::binary(), &[], &budget(0)).is_err());
    assert!(zeta_bruteforce(&TaskSpec::binary(), &[0.0], &budget(0)).is_err());
    assert!(zeta_bruteforce(&TaskSpec::ranking(5).unwrap(), &[0.1], &budget(0)).is_err());
}

#[test]
fn cyclic_shifts_decompose_uniform_marginals() {
    for m in [2usize, 3, 4] {
        let d = ranking_d_bound(m).unwrap();
        assert_eq!(d.permutations.len(), m);
        assert!(d.weights.iter().all(|w| (w - 1.0 / m as f64).abs() < 1e-15));
        assert!(d.max_residual <= 1e-12);
        assert_eq!(d.d_bound, m as f64);
        // rebuild the mixture independently from the permutations
        let mut mix = vec![0.0; m * m];
        for (p, w) in d.permutations.iter().zip(&d.weights) {
            let Label::Permutation(sigma) = p else { panic!("not a permutation") };
            for (i, s) in sigma.iter().enumerate() {
                mix[i * m + s] += w;
            }
        }
        assert!(mix.iter().all(|x| (x - 1.0 / m as f64).abs() <= 1e-12));
    }
}
