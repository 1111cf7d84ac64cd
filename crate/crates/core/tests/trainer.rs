use m4n::synth::{synth_generate, SynthKind};
use m4n::trainer::{dual_gap, step_size};
use m4n::{train, Dataset, DualModel, KernelSpec, Label, Layout, Method, OracleBudget, PolytopeState, TaskSpec, TrainConfig};
use proptest::prelude::*;

fn one_example() -> Dataset {
    Dataset::new(vec![vec![0.3, -0.2]], vec![Label::Class(0)]).unwrap()
}

/// Dual of the single binary example at `mu = (p, 1 - p)` with `lambda = 1` and `k(x, x) = 1`:
/// Bayes risk `min(p, 1 - p)` minus `||w||^2 / 2 = (1 - p)^2`.
fn one_example_dual(p: f64) -> f64 {
    p.min(1.0 - p) - (1.0 - p).powi(2)
}

#[test]
fn step_size_schedule() {
    assert_eq!(step_size(0, 10), 1.0);
    for n in [1, 7, 100] {
        for t in [0, 1, 5, 1000] {
            assert_eq!(step_size(t, n), 2.0 * n as f64 / (t as f64 + 2.0 * n as f64));
        }
    }
}

#[test]
fn single_binary_example_reaches_grid_optimum() {
    let grid_best = (0..=100_000).map(|i| one_example_dual(i as f64 / 100_000.0)).fold(f64::NEG_INFINITY, f64::max);
    let cfg = TrainConfig { passes: 200, lambda: 1.0, oracle: OracleBudget::Exact, ..TrainConfig::default() };
    let (model, report) = train(&one_example(), &TaskSpec::binary(), &cfg).unwrap();
    for w in report.passes.windows(2) {
        assert!(w[1].dual_objective >= w[0].dual_objective - 1e-12);
    }
    assert!(report.last().dual_gap.unwrap() <= 1e-4);
    assert!((report.last().dual_objective - grid_best).abs() < 1e-4);
    let p = model.dual_mu()[0].values()[0];
    assert!((one_example_dual(p) - report.last().dual_objective).abs() < 1e-12);

    let mut at_optimum = model.clone();
    at_optimum.set_dual(0, PolytopeState::new(Layout::Simplex { k: 2 }, vec![0.5, 0.5]).unwrap()).unwrap();
    assert!(dual_gap(&at_optimum, 200).unwrap().dual_gap <= 1e-6);
}

#[test]
fn fresh_model_gap_is_max_entropy_risk() {
    let data = Dataset::new(vec![vec![0.0], vec![1.0], vec![2.0]], vec![Label::Class(0), Label::Class(2), Label::Class(1)]).unwrap();
    let model = DualModel::new(&data, &TaskSpec::multiclass(3).unwrap(), 0.5, KernelSpec::Gaussian { gamma: 1.0 }, Method::M4n).unwrap();
    assert!((dual_gap(&model, 200).unwrap().dual_gap - 2.0 / 3.0).abs() < 1e-9);
}

#[test]
fn zero_model_predicts_first_label() {
    let data = Dataset::new(vec![vec![0.0], vec![1.0]], vec![Label::Class(2), Label::Class(1)]).unwrap();
    let model = DualModel::new(&data, &TaskSpec::multiclass(3).unwrap(), 0.5, KernelSpec::Gaussian { gamma: 1.0 }, Method::M4n).unwrap();
    for x in [[-3.0], [0.5], [10.0]] {
        assert_eq!(model.predict(&x).unwrap(), Label::Class(0));
    }
    let chain = Dataset::new(vec![vec![0.0]], vec![Label::Sequence(vec![1, 1, 0])]).unwrap();
    let model = DualModel::new(&chain, &TaskSpec::chain(3, 2).unwrap(), 0.5, KernelSpec::Linear, Method::M4n).unwrap();
    assert_eq!(model.predict(&[1.0]).unwrap(), Label::Sequence(vec![0, 0, 0]));
}

#[test]
fn single_point_prediction_decodes_its_coefficients() {
    let data = Dataset::new(vec![vec![0.5, 1.0]], vec![Label::Class(1)]).unwrap();
    let task = TaskSpec::multiclass(3).unwrap();
    let cfg = TrainConfig { passes: 3, lambda: 0.2, kernel: KernelSpec::Gaussian { gamma: 2.0 }, ..TrainConfig::default() };
    let (model, _) = train(&data, &task, &cfg).unwrap();
    // k(x, x) = 1, so the scores at the training point are the coefficient row itself
    let c = model.kernel_coeffs().to_vec();
    let scores = model.scores(&[0.5, 1.0]).unwrap();
    assert!(scores.iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-15));
    assert_eq!(model.predict(&[0.5, 1.0]).unwrap(), task.decode(&c).unwrap());
    assert_eq!(model.predict(&[0.5, 1.0]).unwrap(), Label::Class(1));
}

fn blob_config(oracle: OracleBudget, seed: u64) -> TrainConfig {
    TrainConfig { passes: 30, lambda: 0.01, oracle, kernel: KernelSpec::Gaussian { gamma: 0.5 }, seed, ..TrainConfig::default() }
}

#[test]
fn blob_error_is_near_bayes() {
    let train_set = synth_generate(&SynthKind::Blobs { k: 3, n: 300, separation: 2.0, dim: 2 }, 1).unwrap();
    let test_set = synth_generate(&SynthKind::Blobs { k: 3, n: 3000, separation: 2.0, dim: 2 }, 2).unwrap();
    let bayes = test_set.bayes_error.unwrap();
    let (model, report) = train(&train_set.dataset, &train_set.task, &blob_config(OracleBudget::Schedule { max_iters: 500 }, 1)).unwrap();
    let err = model.evaluate(&test_set.dataset).unwrap();
    assert!((err - bayes).abs() <= 0.03, "error {err} vs Bayes {bayes}");
    assert!(model.consistency_error() <= 1e-10);
    // the gap may only rise by the inexactness of that pass's oracle calls
    for w in report.passes.windows(2) {
        assert!(w[1].dual_gap.unwrap() <= w[0].dual_gap.unwrap() + w[1].mean_oracle_gap + 1e-9);
    }
}

#[test]
fn runs_are_seed_deterministic() {
    let data = synth_generate(&SynthKind::Hmm { parts: 3, states: 2, n: 15, stay: 0.8, separation: 2.0 }, 5).unwrap();
    let cfg = TrainConfig { passes: 3, lambda: 0.1, seed: 9, gap_oracle_iters: 50, ..TrainConfig::default() };
    let a = train(&data.dataset, &data.task, &cfg).unwrap();
    let b = train(&data.dataset, &data.task, &cfg).unwrap();
    assert_eq!(a.1, b.1);
    assert_eq!(a.0, b.0);
    let c = train(&data.dataset, &data.task, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.1, c.1);
}

#[test]
fn max_min_margin_finds_the_plurality_class() {
    let probs = vec![0.4, 0.35, 0.25];
    let train_set = synth_generate(&SynthKind::FlatNoise { probs: probs.clone(), n: 1000, dim: 2 }, 3).unwrap();
    let test_set = synth_generate(&SynthKind::FlatNoise { probs, n: 500, dim: 2 }, 4).unwrap();
    let share = |method| {
        let cfg = TrainConfig {
            passes: 10,
            lambda: 0.1,
            method,
            oracle: OracleBudget::Schedule { max_iters: 500 },
            kernel: KernelSpec::Gaussian { gamma: 1.0 },
            track_gap: false,
            ..TrainConfig::default()
        };
        let (model, _) = train(&train_set.dataset, &train_set.task, &cfg).unwrap();
        let preds = model.predict_batch(&test_set.dataset.inputs).unwrap();
        preds.iter().filter(|p| **p == Label::Class(0)).count() as f64 / preds.len() as f64
    };
    let (m4n, m3n) = (share(Method::M4n), share(Method::M3n));
    assert!(m4n >= 0.95, "max-min margin predicts the plurality class on {m4n}");
    assert!(m3n < m4n, "max-margin share {m3n}");
}

#[test]
fn invalid_configs_are_rejected() {
    let data = one_example();
    let task = TaskSpec::binary();
    for cfg in [
        TrainConfig { lambda: 0.0, ..TrainConfig::default() },
        TrainConfig { lambda: f64::NAN, ..TrainConfig::default() },
        TrainConfig { oracle: OracleBudget::Fixed { iterations: 0 }, ..TrainConfig::default() },
        TrainConfig { kernel: KernelSpec::Gaussian { gamma: -1.0 }, ..TrainConfig::default() },
    ] {
        assert!(train(&data, &task, &cfg).is_err());
    }
    let chain = Dataset::new(vec![vec![0.0]], vec![Label::Sequence(vec![0, 1])]).unwrap();
    let cfg = TrainConfig { oracle: OracleBudget::Exact, ..TrainConfig::default() };
    assert!(train(&chain, &TaskSpec::chain(2, 2).unwrap(), &cfg).is_err());
    assert!(train(&data, &TaskSpec::multiclass(3).unwrap(), &TrainConfig::default()).is_ok());
    let wrong = Dataset::new(vec![vec![0.0]], vec![Label::Class(5)]).unwrap();
    assert!(train(&wrong, &task, &TrainConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coefficients_match_dual_variables(seed in 0u64..1000, pick in 0usize..3, lambda in 0.01f64..1.0) {
        let kind = [
            SynthKind::Blobs { k: 3, n: 20, separation: 2.0, dim: 2 },
            SynthKind::Ordinal { k: 4, n: 20, dim: 2, noise: 0.3 },
            SynthKind::Hmm { parts: 3, states: 2, n: 8, stay: 0.7, separation: 1.5 },
        ][pick].clone();
        let data = synth_generate(&kind, seed).unwrap();
        let cfg = TrainConfig { passes: 2, lambda, seed, track_gap: false, oracle: OracleBudget::Fixed { iterations: 10 }, ..TrainConfig::default() };
        let (model, report) = train(&data.dataset, &data.task, &cfg).unwrap();
        prop_assert!(model.consistency_error() <= 1e-10);
        for mu in model.dual_mu() {
            prop_assert!(mu.check_invariants().is_ok());
        }
        prop_assert_eq!(report.passes.len(), 3);
        prop_assert_eq!(report.last().iterations, 2 * data.dataset.len());
    }
}
