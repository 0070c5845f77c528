#![allow(dead_code)]

use l2d_core::dataset::{generate_cifar_style, CifarStyleConfig, Dataset, TrainTest};
use l2d_core::embedding::{train_embedding, EmbeddingConfig, EmbeddingModel};
use l2d_core::experiment::{build_synthetic_expert, with_synthetic_predictions};
use l2d_core::nn::BackboneConfig;
use l2d_core::synthetic_expert::SyntheticExpert;

pub struct Fixture {
    /// Every row carries the synthetic expert's prediction.
    pub ds: Dataset,
    pub folds: TrainTest,
    pub embedding: EmbeddingModel,
    pub expert: SyntheticExpert,
}

pub fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        hidden: vec![32],
        features: 16,
        ..BackboneConfig::default()
    }
}

/// Four superclasses of three subclasses, 480 train / 240 test rows.
pub fn fixture(strength_fraction: f64, seed: u64) -> Fixture {
    let ds = generate_cifar_style(&CifarStyleConfig {
        classes: 4,
        subclasses_per_class: 3,
        train_per_subclass: 40,
        test_per_subclass: 20,
        seed,
        ..CifarStyleConfig::default()
    })
    .unwrap();
    let folds = TrainTest::from_folds(&ds).unwrap();
    let embedding = train_embedding(
        &ds,
        &folds.train,
        &EmbeddingConfig {
            backbone: small_backbone(),
            epochs: 20,
            seed,
            ..EmbeddingConfig::default()
        },
    )
    .unwrap();
    let expert = build_synthetic_expert(&ds, &folds.train, &embedding, strength_fraction, seed).unwrap();
    let ds = with_synthetic_predictions(&ds, &expert).unwrap();
    Fixture {
        ds,
        folds,
        embedding,
        expert,
    }
}
