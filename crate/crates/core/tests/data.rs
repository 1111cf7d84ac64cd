use m4n::data::{parse_dataset, parse_ranking, parse_sequences, parse_tabular, write_dataset, Standardizer};
use m4n::synth::{blob_bayes_error, synth_generate, SynthKind};
use m4n::{DataFormat, Label, M4nError, TaskKind};

fn parse_line(err: M4nError) -> usize {
    match err {
        M4nError::Parse { line, .. } => line,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn tabular_labels_are_one_based() {
    let ds = parse_tabular("feature_0,feature_1,label\n0.5,1,2\n\n-1,2e-3,1\n", None).unwrap();
    assert_eq!(ds.labels, vec![Label::Class(1), Label::Class(0)]);
    assert_eq!(ds.inputs[1], vec![-1.0, 0.002]);
    assert_eq!(parse_line(parse_tabular("feature_0,label\n1,0\n", None).unwrap_err()), 2);
    assert_eq!(parse_line(parse_tabular("feature_0,label\n1,1\n1,2,3\n", None).unwrap_err()), 3);
    assert_eq!(parse_line(parse_tabular("feature_0,label\n1,1\n1,4\n", Some(3)).unwrap_err()), 3);
    assert_eq!(parse_line(parse_tabular("feature_1,label\n", None).unwrap_err()), 1);
    assert_eq!(parse_line(parse_tabular("feature_0,label\nnan,1\n", None).unwrap_err()), 2);
}

#[test]
fn sequence_label_strings() {
    let (ids, ds) = parse_sequences("s1\tabba\t1,0|0,1|0,1|1,0\ns2\t1,2,2,1\t0,0|1,1|2,2|3,3\n").unwrap();
    assert_eq!(ids, vec!["s1", "s2"]);
    assert_eq!(ds.labels[0], Label::Sequence(vec![0, 1, 1, 0]));
    assert_eq!(ds.labels[1], Label::Sequence(vec![0, 1, 1, 0]));
    assert_eq!(ds.inputs[1], vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    assert_eq!(parse_line(parse_sequences("a\tab\t1|2\nb\tab\t1|2|3\n").unwrap_err()), 2);
    assert_eq!(parse_line(parse_sequences("a\tab\t1|2\nb\tabc\t1|2|3\n").unwrap_err()), 2);
    assert_eq!(parse_line(parse_sequences("a\tab\n").unwrap_err()), 1);
}

#[test]
fn ranking_rows_must_be_permutations() {
    let ds = parse_ranking("feature_0,rank_1,rank_2,rank_3\n0.1,2,3,1\n").unwrap();
    assert_eq!(ds.labels[0], Label::Permutation(vec![1, 2, 0]));
    assert_eq!(parse_line(parse_ranking("feature_0,rank_1,rank_2\n0.1,1,1\n").unwrap_err()), 2);
    assert_eq!(parse_line(parse_ranking("feature_0,rank_1,rank_3\n").unwrap_err()), 1);
}

#[test]
fn synthetic_files_round_trip() {
    let kinds = [
        (SynthKind::Blobs { k: 3, n: 20, separation: 2.0, dim: 2 }, DataFormat::Tabular),
        (SynthKind::Ordinal { k: 4, n: 20, dim: 3, noise: 0.2 }, DataFormat::Tabular),
        (SynthKind::Hmm { parts: 4, states: 3, n: 10, stay: 0.7, separation: 2.0 }, DataFormat::Sequence),
        (SynthKind::Rankings { items: 4, n: 10, dim: 2, noise: 0.1 }, DataFormat::Ranking),
    ];
    for (kind, format) in kinds {
        let out = synth_generate(&kind, 17).unwrap();
        let text = write_dataset(&out.dataset, format);
        let back = parse_dataset(&text, format).unwrap();
        assert_eq!(back, out.dataset, "{kind:?}");
        assert_eq!(synth_generate(&kind, 17).unwrap(), out);
        assert_ne!(synth_generate(&kind, 18).unwrap().dataset, out.dataset);
        out.dataset.validate(&out.task).unwrap();
    }
}

#[test]
fn content_hash_tracks_content() {
    let a = synth_generate(&SynthKind::Blobs { k: 2, n: 30, separation: 1.0, dim: 2 }, 1).unwrap().dataset;
    let b = synth_generate(&SynthKind::Blobs { k: 2, n: 30, separation: 1.0, dim: 2 }, 2).unwrap().dataset;
    assert_eq!(a.content_hash(), a.clone().content_hash());
    assert_ne!(a.content_hash(), b.content_hash());
}

#[test]
fn standardizer_uses_training_statistics() {
    let out = synth_generate(&SynthKind::Blobs { k: 3, n: 200, separation: 3.0, dim: 3 }, 5).unwrap();
    let st = Standardizer::fit(&out.dataset);
    let z = st.apply(&out.dataset);
    for j in 0..3 {
        let col: Vec<f64> = z.inputs.iter().map(|x| x[j]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
    assert_eq!(z.labels, out.dataset.labels);
}

#[test]
fn synthetic_bayes_errors() {
    let same = synth_generate(&SynthKind::Blobs { k: 3, n: 10, separation: 0.0, dim: 2 }, 0).unwrap();
    assert!((same.bayes_error.unwrap() - 2.0 / 3.0).abs() < 1e-9);
    assert!(blob_bayes_error(2, 8.0, 2) < 1e-3);
    let flat = synth_generate(&SynthKind::FlatNoise { probs: vec![0.4, 0.35, 0.25], n: 50, dim: 2 }, 0).unwrap();
    assert!((flat.bayes_error.unwrap() - 0.6).abs() < 1e-12);
    assert!(flat.bayes.iter().all(|y| *y == Label::Class(0)));
    assert_eq!(flat.task.kind(), TaskKind::Multiclass { k: 3 });
    // the empirical error of the Bayes labels on a large sample sits near the analytic value
    let big = synth_generate(&SynthKind::Blobs { k: 3, n: 20_000, separation: 2.0, dim: 2 }, 3).unwrap();
    let wrong = big.bayes.iter().zip(&big.dataset.labels).filter(|(a, b)| a != b).count() as f64 / 20_000.0;
    assert!((wrong - big.bayes_error.unwrap()).abs() < 0.01, "{wrong} vs {:?}", big.bayes_error);
}

#[test]
fn synth_rejects_bad_parameters() {
    assert!(synth_generate(&SynthKind::FlatNoise { probs: vec![0.5, 0.6], n: 10, dim: 1 }, 0).is_err());
    assert!(synth_generate(&SynthKind::Blobs { k: 1, n: 10, separation: 1.0, dim: 2 }, 0).is_err());
    assert!(synth_generate(&SynthKind::Blobs { k: 3, n: 0, separation: 1.0, dim: 2 }, 0).is_err());
}
