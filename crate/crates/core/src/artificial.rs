//! Artificial expert predictions for instances the expert never labeled.
//!
//! A predicted "correct" becomes the true class; a predicted "incorrect" becomes a
//! class drawn uniformly from the remaining ones. The wrong class ignores the expert's
//! real confusion structure on purpose.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{Class, Dataset, DatasetSplit, Provenance};
use crate::error::{Error, Result};
use crate::expertise::ExpertiseModel;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtificialPrediction {
    pub id: String,
    pub h_bin_hat: bool,
    pub h_hat: Class,
    pub confidence: f64,
}

/// Multi-class artificial prediction from a binary one.
pub fn translate<R: rand::Rng + ?Sized>(correct: bool, y: Class, k: usize, rng: &mut R) -> Result<Class> {
    if y.index() >= k {
        return Err(Error::Precondition(format!("class {y} outside 1..={k}")));
    }
    if correct {
        return Ok(y);
    }
    if k < 2 {
        return Err(Error::ImpossibleDraw(k));
    }
    let draw = rng.random_range(0..k - 1);
    Ok(Class(if draw >= y.index() { draw + 1 } else { draw }))
}

/// Per-id random stream for the translation step.
pub fn translation_rng(seed: u64, id: &str) -> seed::Rng {
    seed::rng_for(seed, &format!("translate/{id}"))
}

/// Artificial predictions for the unlabeled rows of `split`.
pub fn artificial_predictions(
    dataset: &Dataset,
    unlabeled: &[usize],
    model: &ExpertiseModel,
    seed: u64,
) -> Result<Vec<ArtificialPrediction>> {
    let predictions = model.predict_correctness(&dataset.inputs(unlabeled))?;
    unlabeled
        .iter()
        .zip(predictions)
        .map(|(&i, p)| {
            let ex = dataset.example(i);
            let mut rng = translation_rng(seed, &ex.id);
            Ok(ArtificialPrediction {
                id: ex.id.clone(),
                h_bin_hat: p.correct,
                h_hat: translate(p.correct, ex.y, dataset.k(), &mut rng)?,
                confidence: p.confidence,
            })
        })
        .collect()
}

/// Training set with an expert prediction on every row: real ones on the labeled rows,
/// artificial ones on the unlabeled rows. Test rows are dropped.
pub fn complete_dataset(
    dataset: &Dataset,
    split: &DatasetSplit,
    model: &ExpertiseModel,
    seed: u64,
) -> Result<Dataset> {
    let labeled: BTreeSet<usize> = split.labeled.iter().copied().collect();
    if let Some(&i) = split.unlabeled.iter().find(|i| labeled.contains(i)) {
        return Err(Error::Integrity(format!(
            "instance {} is both labeled and unlabeled",
            dataset.example(i).id
        )));
    }
    for &i in &split.labeled {
        if dataset.example(i).h.is_none() {
            return Err(Error::Precondition(format!(
                "labeled instance {} has no expert prediction",
                dataset.example(i).id
            )));
        }
    }
    let artificial = artificial_predictions(dataset, &split.unlabeled, model, seed)?;
    let updates = split
        .labeled
        .iter()
        .map(|&i| (i, dataset.example(i).h, Some(Provenance::Real)))
        .chain(split.unlabeled.iter().zip(artificial).map(|(&i, a)| {
            (
                i,
                Some(a.h_hat),
                Some(Provenance::Artificial {
                    correct: a.h_bin_hat,
                    confidence: a.confidence,
                }),
            )
        }));
    let filled = dataset.with_expert(updates.collect::<Vec<_>>())?;
    filled.subset(&split.train())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn correct_keeps_the_label() {
        let mut rng = seed::rng(0);
        assert_eq!(translate(true, Class(6), 20, &mut rng).unwrap(), Class(6));
    }

    #[test]
    fn incorrect_never_returns_the_label() {
        let mut rng = seed::rng(1);
        for _ in 0..2000 {
            let c = translate(false, Class(6), 20, &mut rng).unwrap();
            assert_ne!(c, Class(6));
            assert!(c.index() < 20);
        }
    }

    #[test]
    fn single_class_cannot_be_wrong() {
        let mut rng = seed::rng(2);
        assert!(matches!(
            translate(false, Class(0), 1, &mut rng),
            Err(Error::ImpossibleDraw(1))
        ));
        assert_eq!(translate(true, Class(0), 1, &mut rng).unwrap(), Class(0));
    }

    #[test]
    fn per_id_stream_is_stable() {
        let a: u64 = translation_rng(5, "x1").random();
        let b: u64 = translation_rng(5, "x1").random();
        let c: u64 = translation_rng(5, "x2").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
