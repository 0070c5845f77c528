use l2d_core::dataset::{Class, TaxonomyMap};
use l2d_core::seed;
use l2d_core::synthetic_expert::{sample_strength_set, SimilarityMatrix, SyntheticExpert};
use ndarray::Array2;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Five superclasses of two subclasses each.
fn taxonomy() -> TaxonomyMap {
    TaxonomyMap::new((0..10).map(|s| Class(s / 2)).collect(), 5).unwrap()
}

fn random_similarity(seed: u64) -> SimilarityMatrix {
    let mut rng = seed::rng(seed);
    let mut v = Array2::from_elem((10, 10), 1.0);
    for a in 0..10 {
        for b in a + 1..10 {
            let s: f64 = rand::Rng::random_range(&mut rng, 0.05..0.95);
            v[[a, b]] = s;
            v[[b, a]] = s;
        }
    }
    SimilarityMatrix::from_values(v).unwrap()
}

fn expert(similarity: SimilarityMatrix, strengths: &[usize], seed: u64) -> SyntheticExpert {
    SyntheticExpert {
        strengths: strengths.iter().copied().collect(),
        base: strengths[0],
        seed,
        similarity,
        taxonomy: taxonomy(),
    }
}

#[test]
fn weakness_confusions_follow_similarity_row() {
    let sim = random_similarity(5);
    let e = expert(sim.clone(), &[0], 1);
    let y_sub = 3;
    let mut counts = [0usize; 10];
    let mut rng = seed::rng(17);
    let draws = 10_000;
    for _ in 0..draws {
        counts[e.sample_confusion(y_sub, &mut rng)] += 1;
    }
    let row = sim.values().row(y_sub).to_owned();
    let total: f64 = row.sum();
    let stat: f64 = counts
        .iter()
        .zip(row.iter())
        .map(|(&c, &s)| {
            let expected = draws as f64 * s / total;
            (c as f64 - expected).powi(2) / expected
        })
        .sum();
    let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square p = {p}, counts {counts:?}");
}

#[test]
fn dominant_neighbor_joins_the_strength_set() {
    // S[a][partner(a)] = 1, everything else off the diagonal near zero
    let mut v = Array2::from_elem((10, 10), 0.001);
    for a in 0..10 {
        v[[a, a]] = 1.0;
        v[[a, a ^ 1]] = 1.0;
    }
    let sim = SimilarityMatrix::from_values(v).unwrap();
    let hits = (0..1000)
        .filter(|&s| {
            let e = sample_strength_set(&sim, &taxonomy(), 2, s).unwrap();
            e.is_strength(e.base ^ 1)
        })
        .count();
    assert!(hits >= 950, "{hits}/1000");
}

#[test]
fn base_subclass_is_roughly_uniform() {
    let sim = random_similarity(2);
    let mut counts = [0usize; 10];
    for s in 0..5000 {
        counts[sample_strength_set(&sim, &taxonomy(), 3, s).unwrap().base] += 1;
    }
    let stat: f64 = counts.iter().map(|&c| (c as f64 - 500.0).powi(2) / 500.0).sum();
    let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(stat);
    assert!(p > 0.01, "p = {p}, counts {counts:?}");
}

#[test]
fn save_load_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let e = sample_strength_set(&random_similarity(8), &taxonomy(), 4, 21).unwrap();
    let path = dir.path().join("expert.txt");
    e.save(&path).unwrap();
    let back = SyntheticExpert::load(&path, &taxonomy()).unwrap();
    for sub in 0..10 {
        for id in ["a", "b", "c"] {
            assert_eq!(back.predict(sub, id).unwrap(), e.predict(sub, id).unwrap());
        }
    }
}

proptest! {
    #[test]
    fn strength_sets_have_the_requested_size_and_are_always_right(
        n in 1usize..=10,
        seed in any::<u64>(),
        sim_seed in 0u64..20,
    ) {
        let e = sample_strength_set(&random_similarity(sim_seed), &taxonomy(), n, seed).unwrap();
        prop_assert_eq!(e.strengths.len(), n);
        prop_assert!(e.is_strength(e.base));
        for &s in &e.strengths {
            prop_assert_eq!(e.predict(s, &format!("i{seed}")).unwrap(), Class(s / 2));
        }
        let again = sample_strength_set(&random_similarity(sim_seed), &taxonomy(), n, seed).unwrap();
        prop_assert_eq!(&e.strengths, &again.strengths);
    }

    #[test]
    fn predictions_stay_inside_the_superclass_range(sub in 0usize..10, id in "[a-z0-9]{1,8}") {
        let e = sample_strength_set(&random_similarity(1), &taxonomy(), 3, 4).unwrap();
        let h = e.predict(sub, &id).unwrap();
        prop_assert!(h.0 < 5);
        prop_assert_eq!(h, e.predict(sub, &id).unwrap());
    }
}

#[test]
fn out_of_range_requests_are_errors() {
    let sim = random_similarity(0);
    assert!(sample_strength_set(&sim, &taxonomy(), 0, 0).is_err());
    assert!(sample_strength_set(&sim, &taxonomy(), 11, 0).is_err());
    assert!(sample_strength_set(&sim, &TaxonomyMap::identity(3), 2, 0).is_err());
    let e = sample_strength_set(&sim, &taxonomy(), 2, 0).unwrap();
    assert!(e.predict(10, "x").is_err());
}
