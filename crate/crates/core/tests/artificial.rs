mod common;

use l2d_core::artificial::{artificial_predictions, complete_dataset, translate, translation_rng};
use l2d_core::dataset::{complete_split, sample_labeled_subset, Class, Provenance};
use l2d_core::experiment::fully_labeled;
use l2d_core::expertise::{CorrectnessHead, ExpertiseModel, ExpertiseVariant};
use proptest::prelude::*;

fn constant_model(f: &common::Fixture, correct: bool) -> ExpertiseModel {
    ExpertiseModel {
        variant: ExpertiseVariant::EmbeddingNn,
        backbone: f.embedding.network.backbone.clone(),
        head: CorrectnessHead::Constant(correct),
        projection: None,
        metrics: Vec::new(),
    }
}

proptest! {
    #[test]
    fn translation_round_trip(k in 2usize..40, y in 0usize..40, correct in any::<bool>(), seed in any::<u64>(), id in "[a-z]{1,6}") {
        let y = Class(y % k);
        let h = translate(correct, y, k, &mut translation_rng(seed, &id)).unwrap();
        prop_assert!(h.0 < k);
        prop_assert_eq!(h == y, correct);
        prop_assert_eq!(h, translate(correct, y, k, &mut translation_rng(seed, &id)).unwrap());
    }
}

#[test]
fn labeled_rows_keep_real_predictions_and_test_rows_are_dropped() {
    let f = common::fixture(0.5, 11);
    let split = sample_labeled_subset(&f.ds, &f.folds, 5, 3).unwrap();
    let model = constant_model(&f, false);
    let completed = complete_dataset(&f.ds, &split, &model, 7).unwrap();
    assert_eq!(completed.len(), split.l() + split.u());
    for &i in &split.labeled {
        let ex = f.ds.example(i);
        let c = completed.example(completed.position(&ex.id).unwrap());
        assert_eq!(c.h, ex.h);
        assert_eq!(c.provenance, Some(Provenance::Real));
    }
    for &i in &split.unlabeled {
        let ex = f.ds.example(i);
        let c = completed.example(completed.position(&ex.id).unwrap());
        assert!(matches!(c.provenance, Some(Provenance::Artificial { correct: false, .. })));
        assert_ne!(c.h, Some(c.y));
    }
    for &i in &f.folds.test {
        assert!(completed.position(&f.ds.example(i).id).is_none());
    }
}

#[test]
fn empty_unlabeled_set_changes_nothing() {
    let f = common::fixture(0.5, 12);
    let completed = complete_dataset(&f.ds, &complete_split(&f.folds), &constant_model(&f, true), 0).unwrap();
    let real = fully_labeled(&f.ds, &f.folds).unwrap();
    assert_eq!(completed.len(), real.len());
    for (a, b) in completed.examples().iter().zip(real.examples()) {
        assert_eq!((&a.id, a.h), (&b.id, b.h));
    }
}

#[test]
fn oracle_expertise_model_reproduces_the_expert() {
    // an expert that is always right, with a predictor that knows it
    let f = common::fixture(1.0, 13);
    let split = sample_labeled_subset(&f.ds, &f.folds, 2, 0).unwrap();
    let completed = complete_dataset(&f.ds, &split, &constant_model(&f, true), 5).unwrap();
    for ex in completed.examples() {
        let original = f.ds.example(f.ds.position(&ex.id).unwrap());
        assert_eq!(ex.h, original.h);
    }
}

#[test]
fn artificial_predictions_are_seeded_per_id() {
    let f = common::fixture(0.5, 14);
    let split = sample_labeled_subset(&f.ds, &f.folds, 2, 0).unwrap();
    let model = constant_model(&f, false);
    let a = artificial_predictions(&f.ds, &split.unlabeled, &model, 9).unwrap();
    // a reversed request order gives the same prediction per id
    let reversed: Vec<usize> = split.unlabeled.iter().rev().copied().collect();
    let mut b = artificial_predictions(&f.ds, &reversed, &model, 9).unwrap();
    b.reverse();
    assert_eq!(a, b);
    let c = artificial_predictions(&f.ds, &split.unlabeled, &model, 10).unwrap();
    assert!(a.iter().zip(&c).any(|(x, y)| x.h_hat != y.h_hat));
}

#[test]
fn overlapping_split_is_an_integrity_error() {
    let f = common::fixture(0.5, 15);
    let mut split = sample_labeled_subset(&f.ds, &f.folds, 2, 0).unwrap();
    split.unlabeled.push(split.labeled[0]);
    assert!(complete_dataset(&f.ds, &split, &constant_model(&f, true), 0).is_err());
}
