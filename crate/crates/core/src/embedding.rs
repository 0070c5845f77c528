//! Embedding model: a backbone trained jointly with a classification head on the
//! ground-truth labels of every training instance. Its backbone is later reused, frozen,
//! as the feature extractor for expertise prediction; its head is the standalone
//! classifier.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Class, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    argmax_row, cross_entropy, softmax_rows, BackboneConfig, Grads, Network, Params, Sgd,
    SgdConfig,
};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub backbone: BackboneConfig,
    pub optimizer: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Cosine-anneal the learning rate to zero over training.
    pub cosine_schedule: bool,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            backbone: BackboneConfig::default(),
            optimizer: SgdConfig::default(),
            epochs: 200,
            batch_size: 64,
            cosine_schedule: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub network: Network,
    pub k: usize,
    pub config: EmbeddingConfig,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Mean cross-entropy of `network` on `(x, y)` and its gradient for every parameter.
pub fn cross_entropy_objective(network: &Network, x: &Array2<f64>, y: &[Class]) -> (f64, Grads) {
    let (logits, cache) = network.forward(x);
    let targets: Vec<usize> = y.iter().map(|c| c.index()).collect();
    let (loss, grad) = cross_entropy(&logits, &targets, None);
    (loss, network.backward(&cache, &grad))
}

pub(crate) fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Minibatch SGD on a network with hard targets. Returns the per-epoch mean loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_network(
    network: &mut Network,
    x: &Array2<f64>,
    targets: &[usize],
    optimizer: &SgdConfig,
    epochs: usize,
    batch_size: usize,
    cosine: bool,
    rng: &mut seed::Rng,
    step_offset: &mut usize,
) -> Result<Vec<f64>> {
    let schedule = Schedule {
        optimizer,
        epochs,
        batch_size,
        cosine,
    };
    fit_objective(network, x.nrows(), &schedule, rng, step_offset, |net, rows| {
        let xb = x.select(ndarray::Axis(0), rows);
        let tb: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
        let (logits, cache) = net.forward(&xb);
        let (loss, grad) = cross_entropy(&logits, &tb, None);
        (loss, net.backward(&cache, &grad))
    })
}

pub(crate) struct Schedule<'a> {
    pub optimizer: &'a SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub cosine: bool,
}

/// Minibatch SGD over row indices `0..n` with an arbitrary per-batch objective
/// returning (mean loss, gradient). Returns the per-epoch mean loss.
pub(crate) fn fit_objective<F>(
    network: &mut Network,
    n: usize,
    schedule: &Schedule<'_>,
    rng: &mut seed::Rng,
    step_offset: &mut usize,
    mut objective: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&Network, &[usize]) -> (f64, Grads),
{
    if n == 0 {
        return Ok(vec![0.0; schedule.epochs]);
    }
    let batch = schedule.batch_size.max(1).min(n);
    let total = n.div_ceil(batch) * schedule.epochs;
    let base_lr = schedule.optimizer.learning_rate;
    let mut opt = Sgd::new(schedule.optimizer.clone());
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut step = 0;
    for _ in 0..schedule.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            if schedule.cosine {
                opt.set_learning_rate(cosine_lr(base_lr, step, total));
            }
            let (loss, grads) = objective(network, chunk);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: *step_offset + step,
                    loss,
                });
            }
            opt.step(network.param_blocks_mut(), &grads);
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        history.push(epoch_loss / n as f64);
    }
    *step_offset += step;
    Ok(history)
}

/// Trains backbone and head on the ground-truth labels of `indices`.
pub fn train_embedding(
    dataset: &Dataset,
    indices: &[usize],
    config: &EmbeddingConfig,
) -> Result<EmbeddingModel> {
    if indices.is_empty() {
        return Err(Error::Precondition("embedding training set is empty".into()));
    }
    let k = dataset.k();
    let mut network = Network::new(&config.backbone, dataset.shape(), k, config.seed);
    let x = dataset.inputs(indices);
    let targets: Vec<usize> = indices.iter().map(|&i| dataset.example(i).y.index()).collect();
    let mut rng = seed::rng_for(config.seed, "embedding/shuffle");
    let mut steps = 0;
    let loss_history = fit_network(
        &mut network,
        &x,
        &targets,
        &config.optimizer,
        config.epochs,
        config.batch_size,
        config.cosine_schedule,
        &mut rng,
        &mut steps,
    )?;
    log::debug!(
        "embedding trained: {} epochs, final loss {:?}",
        config.epochs,
        loss_history.last()
    );
    Ok(EmbeddingModel {
        network,
        k,
        config: config.clone(),
        loss_history,
    })
}

/// Class predictions with their full distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub classes: Vec<Class>,
    pub probabilities: Array2<f64>,
}

impl Classification {
    pub fn from_probabilities(probabilities: Array2<f64>) -> Classification {
        let classes = probabilities
            .rows()
            .into_iter()
            .map(|r| Class(argmax_row(r)))
            .collect();
        Classification {
            classes,
            probabilities,
        }
    }

    /// Probability assigned to the predicted class.
    pub fn confidence(&self) -> Vec<f64> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| self.probabilities[[i, c.index()]])
            .collect()
    }
}

impl EmbeddingModel {
    fn check_shape(&self, x: &Array2<f64>) -> Result<()> {
        let expected = self.network.backbone.input_len();
        if x.ncols() != expected {
            return Err(Error::Input(format!(
                "payload has {} values, backbone expects {expected}",
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.network.backbone.feature_dim()
    }

    /// `f = Φ_emb(x)` for each row.
    pub fn extract_features(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_shape(x)?;
        Ok(self.network.backbone.features(x))
    }

    /// Argmax class (ties to the lowest index) and the softmax distribution.
    pub fn classify(&self, x: &Array2<f64>) -> Result<Classification> {
        self.check_shape(x)?;
        Ok(Classification::from_probabilities(softmax_rows(
            &self.network.logits(x),
        )))
    }

    pub fn accuracy(&self, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::Precondition("no instances to score".into()));
        }
        let c = self.classify(&dataset.inputs(indices))?;
        let correct = c
            .classes
            .iter()
            .zip(indices)
            .filter(|(p, &i)| **p == dataset.example(i).y)
            .count();
        Ok(correct as f64 / indices.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EmbeddingModel> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Example, PayloadShape, TaxonomyMap};
    use ndarray::array;
    use std::collections::BTreeMap;
    use std::path::PathBuf;

    fn toy(n: usize, k: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| Example {
                id: format!("x{i:03}"),
                payload: vec![(i % k) as f64, ((i * 7) % 5) as f64 / 5.0, 1.0],
                source: String::new(),
                y: Class(i % k),
                y_sub: None,
                h: None,
                provenance: None,
                fold: None,
                meta: BTreeMap::new(),
            })
            .collect();
        Dataset::new(examples, TaxonomyMap::identity(k), PayloadShape::Features(3), PathBuf::new())
            .unwrap()
    }

    fn small_config(epochs: usize) -> EmbeddingConfig {
        EmbeddingConfig {
            backbone: BackboneConfig {
                hidden: vec![16],
                features: 8,
                ..BackboneConfig::default()
            },
            optimizer: SgdConfig {
                learning_rate: 0.05,
                ..SgdConfig::default()
            },
            epochs,
            batch_size: 10,
            cosine_schedule: false,
            seed: 4,
        }
    }

    #[test]
    fn untrained_loss_is_ln_k() {
        let ds = toy(40, 20);
        let net = Network::new(&small_config(1).backbone, ds.shape(), 20, 0);
        let idx: Vec<usize> = (0..40).collect();
        let (loss, _) = cross_entropy_objective(&net, &ds.inputs(&idx), &ds.labels(&idx));
        assert!((loss - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn memorizes_a_single_instance() {
        let ds = toy(1, 2);
        let model = train_embedding(&ds, &[0], &small_config(300)).unwrap();
        assert!(*model.loss_history.last().unwrap() < 0.01);
    }

    #[test]
    fn classify_contract() {
        let ds = toy(30, 3);
        let idx: Vec<usize> = (0..30).collect();
        let model = train_embedding(&ds, &idx, &small_config(30)).unwrap();
        let x = ds.inputs(&idx[..5]);
        let f1 = model.extract_features(&x).unwrap();
        let f2 = model.extract_features(&x).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.dim(), (5, 8));
        let c = model.classify(&x).unwrap();
        for row in c.probabilities.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        assert!(matches!(
            model.extract_features(&array![[1.0, 2.0]]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn classification_argmax_and_ties() {
        let c = Classification::from_probabilities(array![[0.1, 0.7, 0.2], [0.4, 0.2, 0.4]]);
        assert_eq!(c.classes, vec![Class(1), Class(0)]);
        assert_eq!(c.classes[0].one_based(), 2);
        assert_eq!(c.confidence(), vec![0.7, 0.4]);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy(30, 3);
        let idx: Vec<usize> = (0..30).collect();
        let a = train_embedding(&ds, &idx, &small_config(5)).unwrap();
        let b = train_embedding(&ds, &idx, &small_config(5)).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn divergence_reports_step() {
        let mut examples = toy(20, 2).examples().to_vec();
        examples[7].payload[0] = f64::NAN;
        let ds = Dataset::new(
            examples,
            TaxonomyMap::identity(2),
            PayloadShape::Features(3),
            PathBuf::new(),
        )
        .unwrap();
        let idx: Vec<usize> = (0..20).collect();
        match train_embedding(&ds, &idx, &small_config(3)) {
            Err(Error::Divergence { step, loss }) => {
                assert!(step < 2, "first epoch has two steps, got {step}");
                assert!(loss.is_nan());
            }
            other => panic!("expected divergence, got {:?}", other.map(|m| m.loss_history)),
        }
    }
}
