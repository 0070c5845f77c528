mod common;

use l2d_core::dataset::{complete_split, sample_labeled_subset, DatasetSplit};
use l2d_core::expertise::{
    train_expertise, train_max_margin, train_softmax_head, CorrectnessHead, ExpertiseConfig,
    ExpertiseVariant, SupervisedConfig,
};
use l2d_core::nn::softmax_rows;
use ndarray::Array2;
use proptest::prelude::*;

fn quick_config() -> ExpertiseConfig {
    let mut c = ExpertiseConfig::default();
    c.ssl.epochs = 8;
    c.ssl.steps_per_epoch = Some(20);
    c
}

#[test]
fn single_class_labels_give_a_constant_predictor() {
    // every subclass a strength: the expert is never wrong
    let f = common::fixture(1.0, 1);
    let split = sample_labeled_subset(&f.ds, &f.folds, 3, 0).unwrap();
    for variant in [ExpertiseVariant::EmbeddingNn, ExpertiseVariant::EmbeddingSvm] {
        let model = train_expertise(variant, &f.ds, &split, &f.embedding, &quick_config(), 0).unwrap();
        assert_eq!(model.head, CorrectnessHead::Constant(true));
        let p = model.p_correct(&f.ds.inputs(&f.folds.test)).unwrap();
        assert!(p.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn empty_labeled_set_is_rejected() {
    let f = common::fixture(0.5, 2);
    let split = DatasetSplit {
        labeled: Vec::new(),
        unlabeled: f.folds.train.clone(),
        test: f.folds.test.clone(),
    };
    assert!(train_expertise(ExpertiseVariant::EmbeddingNn, &f.ds, &split, &f.embedding, &quick_config(), 0).is_err());
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean predicted probability of "correct" on test rows of strength and weakness subclasses.
fn confidence_by_region(f: &common::Fixture, variant: ExpertiseVariant, split: &DatasetSplit) -> (f64, f64) {
    let model = train_expertise(variant, &f.ds, split, &f.embedding, &quick_config(), 3).unwrap();
    let p = model.p_correct(&f.ds.inputs(&f.folds.test)).unwrap();
    let (mut strong, mut weak) = (Vec::new(), Vec::new());
    for (&i, &v) in f.folds.test.iter().zip(&p) {
        if f.expert.is_strength(f.ds.example(i).y_sub.unwrap()) {
            strong.push(v);
        } else {
            weak.push(v);
        }
    }
    (mean(&strong), mean(&weak))
}

#[test]
fn strengths_get_higher_correctness_probability() {
    let f = common::fixture(0.5, 3);
    let full = complete_split(&f.folds);
    for variant in [ExpertiseVariant::EmbeddingNn, ExpertiseVariant::EmbeddingSvm] {
        let (strong, weak) = confidence_by_region(&f, variant, &full);
        assert!(strong > weak + 0.1, "{variant}: {strong} vs {weak}");
    }
    let split = sample_labeled_subset(&f.ds, &f.folds, 20, 1).unwrap();
    let (strong, weak) = confidence_by_region(&f, ExpertiseVariant::EmbeddingFixMatch, &split);
    assert!(strong > weak, "embedding-fixmatch: {strong} vs {weak}");
}

#[test]
fn every_variant_trains_and_saves() {
    let f = common::fixture(0.5, 4);
    let split = sample_labeled_subset(&f.ds, &f.folds, 4, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let x = f.ds.inputs(&f.folds.test);
    for variant in ExpertiseVariant::ALL {
        let model = train_expertise(variant, &f.ds, &split, &f.embedding, &quick_config(), 5).unwrap();
        assert_eq!(model.variant, variant);
        let preds = model.predict_correctness(&x).unwrap();
        assert!(preds.iter().all(|p| (0.5..=1.0).contains(&p.confidence) && p.p_correct.is_finite()));
        let path = dir.path().join(format!("{variant}.json"));
        model.save(&path).unwrap();
        let back = l2d_core::expertise::ExpertiseModel::load(&path).unwrap();
        assert_eq!(back.predict_correctness(&x).unwrap(), preds);
        // the frozen-embedding variants keep the embedding backbone untouched
        if matches!(variant, ExpertiseVariant::EmbeddingFixMatch | ExpertiseVariant::EmbeddingCoMatch) {
            assert_eq!(model.backbone, f.embedding.network.backbone);
        }
    }
}

fn separable(seed: u64, n: usize, d: usize) -> (Array2<f64>, Vec<usize>) {
    let mut rng = l2d_core::seed::rng(seed);
    let w: Vec<f64> = (0..d).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        loop {
            let row: Vec<f64> = (0..d).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
            let s: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            if s.abs() > 0.3 {
                x.row_mut(i).assign(&ndarray::Array1::from(row));
                labels.push(usize::from(s > 0.0));
                break;
            }
        }
    }
    (x, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn both_heads_fit_separable_correctness(seed in any::<u64>()) {
        let (x, labels) = separable(seed, 60, 4);
        prop_assume!(labels.iter().any(|&l| l == 1) && labels.iter().any(|&l| l == 0));
        let config = SupervisedConfig { iterations: 2000, weight_decay: 0.0, ..SupervisedConfig::default() };
        let head = train_softmax_head(&x, &labels, &config);
        let p = softmax_rows(&head.forward(&x));
        let nn_right = labels.iter().enumerate().filter(|(i, &l)| usize::from(p[[*i, 1]] > 0.5) == l).count();
        prop_assert!(nn_right >= 57, "softmax head {nn_right}/60");
        let svm = train_max_margin(&x, &labels, &config);
        let svm_right = svm.margins(&x).iter().zip(&labels).filter(|(m, &l)| usize::from(**m > 0.0) == l).count();
        prop_assert!(svm_right >= 57, "max-margin head {svm_right}/60");
    }
}
