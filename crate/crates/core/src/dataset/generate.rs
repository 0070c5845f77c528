//! Desk-scale synthetic datasets.
//!
//! `generate_cifar_style` builds a two-level taxonomy: each superclass owns a centroid,
//! each subclass sits near its superclass centroid, instances scatter around their
//! subclass. Latent points are pushed through a fixed random nonlinear map and padded
//! with high-variance nuisance dimensions, so a model fit on few labels from raw inputs
//! struggles where a representation learned from all ground-truth labels does not.
//!
//! `generate_nih_style` builds a binary finding task grouped by patient with gender and
//! age metadata and a single "radiologist" whose accuracy varies across the input space.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Class, Dataset, Example, Fold, PayloadShape, TaxonomyMap};
use crate::error::Result;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CifarStyleConfig {
    pub classes: usize,
    pub subclasses_per_class: usize,
    pub latent_dim: usize,
    /// Informative raw dimensions produced by the nonlinear map.
    pub signal_dim: usize,
    /// Pure-noise raw dimensions appended after the signal.
    pub nuisance_dim: usize,
    pub nuisance_scale: f64,
    pub train_per_subclass: usize,
    pub test_per_subclass: usize,
    pub superclass_spread: f64,
    pub subclass_spread: f64,
    pub instance_noise: f64,
    /// Fraction of atypical instances, drawn with `hard_noise` instead of `instance_noise`.
    pub hard_fraction: f64,
    pub hard_noise: f64,
    pub seed: u64,
}

impl Default for CifarStyleConfig {
    fn default() -> Self {
        CifarStyleConfig {
            classes: 10,
            subclasses_per_class: 5,
            latent_dim: 12,
            signal_dim: 24,
            nuisance_dim: 24,
            nuisance_scale: 1.0,
            train_per_subclass: 160,
            test_per_subclass: 40,
            superclass_spread: 1.6,
            subclass_spread: 1.0,
            instance_noise: 0.65,
            hard_fraction: 0.0,
            hard_noise: 3.0,
            seed: 0,
        }
    }
}

fn gaussian_vec(rng: &mut seed::Rng, dim: usize, scale: f64) -> Array1<f64> {
    Array1::from_iter((0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)))
}

/// Fixed random two-layer map from latent space to the informative raw dimensions.
struct Mixer {
    first: Array2<f64>,
    bias: Array1<f64>,
    second: Array2<f64>,
}

impl Mixer {
    fn new(rng: &mut seed::Rng, latent: usize, out: usize) -> Mixer {
        let hidden = out * 2;
        let first = Array2::from_shape_fn((hidden, latent), |_| {
            rng.sample::<f64, _>(StandardNormal) / (latent as f64).sqrt()
        });
        let bias = gaussian_vec(rng, hidden, 0.3);
        let second = Array2::from_shape_fn((out, hidden), |_| {
            rng.sample::<f64, _>(StandardNormal) / (hidden as f64).sqrt()
        });
        Mixer {
            first,
            bias,
            second,
        }
    }

    fn apply(&self, z: &Array1<f64>) -> Array1<f64> {
        let h = (self.first.dot(z) + &self.bias).mapv(f64::tanh);
        self.second.dot(&h)
    }
}

/// Two-level synthetic classification data with a predefined train/test fold.
pub fn generate_cifar_style(config: &CifarStyleConfig) -> Result<Dataset> {
    let mut rng = seed::rng_for(config.seed, "cifar_style");
    let k = config.classes;
    let per = config.subclasses_per_class;
    let k_sub = k * per;
    let taxonomy = TaxonomyMap::new((0..k_sub).map(|s| Class(s / per)).collect(), k)?;

    let super_centers: Vec<Array1<f64>> = (0..k)
        .map(|_| gaussian_vec(&mut rng, config.latent_dim, config.superclass_spread))
        .collect();
    let sub_centers: Vec<Array1<f64>> = (0..k_sub)
        .map(|s| &super_centers[s / per] + &gaussian_vec(&mut rng, config.latent_dim, config.subclass_spread))
        .collect();
    let mixer = Mixer::new(&mut rng, config.latent_dim, config.signal_dim);
    let dim = config.signal_dim + config.nuisance_dim;

    let mut examples = Vec::with_capacity(k_sub * (config.train_per_subclass + config.test_per_subclass));
    for (fold, count, tag) in [
        (Fold::Train, config.train_per_subclass, "tr"),
        (Fold::Test, config.test_per_subclass, "te"),
    ] {
        for sub in 0..k_sub {
            for j in 0..count {
                let noise = if rng.random::<f64>() < config.hard_fraction {
                    config.hard_noise
                } else {
                    config.instance_noise
                };
                let z = &sub_centers[sub] + &gaussian_vec(&mut rng, config.latent_dim, noise);
                let mut payload = mixer.apply(&z).to_vec();
                payload.extend((0..config.nuisance_dim).map(|_| {
                    config.nuisance_scale * rng.sample::<f64, _>(StandardNormal)
                }));
                debug_assert_eq!(payload.len(), dim);
                examples.push(Example {
                    id: format!("{tag}{sub:03}_{j:04}"),
                    payload,
                    source: String::new(),
                    y: taxonomy.superclass(sub),
                    y_sub: Some(sub),
                    h: None,
                    provenance: None,
                    fold: Some(fold),
                    meta: BTreeMap::new(),
                });
            }
        }
    }
    Dataset::new(examples, taxonomy, PayloadShape::Features(dim), PathBuf::new())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NihStyleConfig {
    pub patients: usize,
    pub max_images_per_patient: usize,
    pub input_dim: usize,
    pub class_separation: f64,
    /// Expert accuracy on "easy" and "hard" regions of the input space.
    pub expert_easy_accuracy: f64,
    pub expert_hard_accuracy: f64,
    pub seed: u64,
}

impl Default for NihStyleConfig {
    fn default() -> Self {
        NihStyleConfig {
            patients: 600,
            max_images_per_patient: 4,
            input_dim: 16,
            class_separation: 1.2,
            expert_easy_accuracy: 0.97,
            expert_hard_accuracy: 0.6,
            seed: 0,
        }
    }
}

/// Binary finding task with patient grouping, gender/age metadata and a real expert
/// column. No fold is assigned; split by patient with `split_train_test`.
pub fn generate_nih_style(config: &NihStyleConfig) -> Result<Dataset> {
    let mut rng = seed::rng_for(config.seed, "nih_style");
    let d = config.input_dim;
    let direction = gaussian_vec(&mut rng, d, 1.0);
    let direction = &direction / direction.dot(&direction).sqrt();
    let hard_axis = gaussian_vec(&mut rng, d, 1.0);
    let hard_axis = &hard_axis / hard_axis.dot(&hard_axis).sqrt();
    let age_dist = Normal::new(55.0, 16.0).expect("valid normal");

    let mut examples = Vec::new();
    for p in 0..config.patients {
        let gender = if rng.random_bool(0.5) { "M" } else { "F" };
        let age: f64 = age_dist.sample(&mut rng);
        let age = age.clamp(18.0, 95.0).round() as u32;
        let patient_offset = gaussian_vec(&mut rng, d, 0.3);
        let images = rng.random_range(1..=config.max_images_per_patient);
        for j in 0..images {
            let positive = rng.random_bool(0.5);
            let sign = if positive { 1.0 } else { -1.0 };
            let x = &direction * (sign * config.class_separation)
                + &patient_offset
                + gaussian_vec(&mut rng, d, 1.0);
            let y = Class(usize::from(positive));
            let hard = x.dot(&hard_axis) > 0.3 || age > 75;
            let accuracy = if hard {
                config.expert_hard_accuracy
            } else {
                config.expert_easy_accuracy
            };
            let h = if rng.random_bool(accuracy) {
                y
            } else {
                Class(1 - y.index())
            };
            let meta = BTreeMap::from([
                ("gender".to_string(), gender.to_string()),
                ("age".to_string(), age.to_string()),
                ("patient_id".to_string(), format!("p{p:04}")),
            ]);
            examples.push(Example {
                id: format!("p{p:04}_{j}"),
                payload: x.to_vec(),
                source: String::new(),
                y,
                y_sub: None,
                h: Some(h),
                provenance: Some(crate::dataset::Provenance::Real),
                fold: None,
                meta,
            });
        }
    }
    Dataset::new(
        examples,
        TaxonomyMap::identity(2),
        PayloadShape::Features(d),
        PathBuf::new(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_style_shapes_and_taxonomy() {
        let cfg = CifarStyleConfig {
            classes: 3,
            subclasses_per_class: 2,
            train_per_subclass: 4,
            test_per_subclass: 2,
            ..CifarStyleConfig::default()
        };
        let ds = generate_cifar_style(&cfg).unwrap();
        assert_eq!(ds.len(), 6 * 6);
        assert_eq!(ds.taxonomy().k_sub(), 6);
        assert_eq!(ds.shape().len(), cfg.signal_dim + cfg.nuisance_dim);
        let again = generate_cifar_style(&cfg).unwrap();
        assert_eq!(ds.fingerprint(), again.fingerprint());
    }

    #[test]
    fn nih_style_has_metadata_and_expert() {
        let ds = generate_nih_style(&NihStyleConfig {
            patients: 20,
            ..NihStyleConfig::default()
        })
        .unwrap();
        assert!(ds.examples().iter().all(|e| e.h.is_some()
            && e.meta("gender").is_some()
            && e.meta("age").is_some()
            && e.meta("patient_id").is_some()));
    }
}
