//! Learning-to-defer algorithms trained on a completed dataset, and the shared team
//! prediction contract: the expert's prediction when the deferral rule fires, the
//! classifier's argmax otherwise.

mod triage;

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use triage::{expert_nll, train_nll_triage};

use crate::dataset::{Class, Dataset};
use crate::embedding::{fit_objective, EmbeddingModel, Schedule};
use crate::error::{Error, Result};
use crate::expertise::{
    train_softmax_head, CorrectnessHead, ExpertiseModel, ExpertiseVariant, SupervisedConfig,
};
use crate::nn::{log_softmax_rows, softmax_rows, argmax_row, BackboneConfig, Network, SgdConfig};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeferAlgorithm {
    /// Extra deferral class trained with a consistent surrogate loss.
    Surrogate,
    /// Separate classifier and expert error model; defer to the more confident one.
    ConfidenceCompare,
    /// Alternating per-instance NLL triage.
    NllTriage,
}

impl DeferAlgorithm {
    pub const ALL: [DeferAlgorithm; 3] = [
        DeferAlgorithm::Surrogate,
        DeferAlgorithm::ConfidenceCompare,
        DeferAlgorithm::NllTriage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DeferAlgorithm::Surrogate => "surrogate",
            DeferAlgorithm::ConfidenceCompare => "confidence-compare",
            DeferAlgorithm::NllTriage => "nll-triage",
        }
    }

    pub fn parse(text: &str) -> Option<DeferAlgorithm> {
        Self::ALL.into_iter().find(|a| a.name() == text)
    }
}

impl std::fmt::Display for DeferAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeferConfig {
    pub backbone: BackboneConfig,
    pub optimizer: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub cosine_schedule: bool,
    /// Weight of the deferral term of the surrogate loss.
    pub alpha: f64,
    pub triage_rounds: usize,
    /// Epochs on all rows before the first triage round; 0 starts from a uniform classifier.
    pub triage_warmup_epochs: usize,
    /// Clip for the expert's probability of being correct in the triage likelihood.
    pub triage_expert_floor: f64,
    /// Head training for the confidence-compare expert error model.
    pub error_model: SupervisedConfig,
}

impl Default for DeferConfig {
    fn default() -> Self {
        DeferConfig {
            backbone: BackboneConfig::default(),
            optimizer: SgdConfig::default(),
            epochs: 100,
            batch_size: 64,
            cosine_schedule: true,
            alpha: 1.0,
            triage_rounds: 3,
            triage_warmup_epochs: 30,
            triage_expert_floor: 0.05,
            error_model: SupervisedConfig::default(),
        }
    }
}

impl DeferConfig {
    pub(crate) fn schedule(&self, epochs: usize) -> Schedule<'_> {
        Schedule {
            optimizer: &self.optimizer,
            epochs,
            batch_size: self.batch_size,
            cosine: self.cosine_schedule,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TeamModel {
    Surrogate {
        network: Network,
        loss_history: Vec<f64>,
    },
    ConfidenceCompare {
        classifier: EmbeddingModel,
        expert: ExpertiseModel,
    },
    Triage {
        classifier: Network,
        deferral: Network,
        /// Mean classifier NLL on its assigned rows after each round.
        round_losses: Vec<f64>,
    },
}

/// Which deferral decisions to use when predicting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeferRule {
    Learned,
    Never,
    Always,
}

/// Per-instance classifier output and deferral bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TeamDecisions {
    pub deferred: Vec<bool>,
    pub classifier: Vec<Class>,
}

impl TeamModel {
    pub fn algorithm(&self) -> DeferAlgorithm {
        match self {
            TeamModel::Surrogate { .. } => DeferAlgorithm::Surrogate,
            TeamModel::ConfidenceCompare { .. } => DeferAlgorithm::ConfidenceCompare,
            TeamModel::Triage { .. } => DeferAlgorithm::NllTriage,
        }
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        let expected = match self {
            TeamModel::Surrogate { network, .. } => network.backbone.input_len(),
            TeamModel::ConfidenceCompare { classifier, .. } => classifier.network.backbone.input_len(),
            TeamModel::Triage { classifier, .. } => classifier.backbone.input_len(),
        };
        if x.ncols() != expected {
            return Err(Error::Input(format!(
                "payload length {} does not match model input {expected}",
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn decide(&self, x: &Array2<f64>, rule: DeferRule) -> Result<TeamDecisions> {
        self.check_input(x)?;
        let (classifier, learned): (Vec<Class>, Vec<bool>) = match self {
            TeamModel::Surrogate { network, .. } => {
                let logits = network.logits(x);
                let k = logits.ncols() - 1;
                logits
                    .rows()
                    .into_iter()
                    .map(|r| {
                        let f = argmax_row(r.slice(ndarray::s![..k]));
                        (Class(f), argmax_row(r) == k)
                    })
                    .unzip()
            }
            TeamModel::ConfidenceCompare { classifier, expert } => {
                let c = classifier.classify(x)?;
                let conf = c.confidence();
                let p = expert.p_correct(x)?;
                let deferred = p.iter().zip(&conf).map(|(e, c)| e > c).collect();
                (c.classes, deferred)
            }
            TeamModel::Triage {
                classifier,
                deferral,
                ..
            } => {
                let f = classifier.logits(x).rows().into_iter().map(|r| Class(argmax_row(r))).collect();
                let d = deferral.logits(x).rows().into_iter().map(|r| argmax_row(r) == 1).collect();
                (f, d)
            }
        };
        let deferred = match rule {
            DeferRule::Learned => learned,
            DeferRule::Never => vec![false; classifier.len()],
            DeferRule::Always => vec![true; classifier.len()],
        };
        Ok(TeamDecisions {
            deferred,
            classifier,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TeamModel> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// The expert's prediction when deferred, otherwise the classifier's.
pub fn team_predict(deferred: bool, classifier: Class, h: Class) -> Class {
    if deferred {
        h
    } else {
        classifier
    }
}

/// Surrogate loss with a deferral class at index `k`:
/// `-log p_y - alpha * 1[h = y] * log p_defer`, averaged over rows, with the logit
/// gradient.
pub fn surrogate_loss(
    logits: &Array2<f64>,
    y: &[usize],
    expert_correct: &[bool],
    alpha: f64,
) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    if n == 0 {
        return (0.0, logits.clone());
    }
    let defer = logits.ncols() - 1;
    let logp = log_softmax_rows(logits);
    let p = logp.mapv(f64::exp);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for i in 0..n {
        let c = if expert_correct[i] { alpha } else { 0.0 };
        loss -= logp[[i, y[i]]] + c * logp[[i, defer]];
        let mut row = grad.row_mut(i);
        row.assign(&(&p.row(i) * (1.0 + c)));
        row[y[i]] -= 1.0;
        row[defer] -= c;
    }
    (loss / n as f64, grad / n as f64)
}

fn completed_columns(dataset: &Dataset) -> Result<(Vec<usize>, Vec<bool>)> {
    dataset
        .examples()
        .iter()
        .map(|ex| {
            let correct = ex.expert_correct().ok_or_else(|| {
                Error::Precondition(format!("instance {} has no expert prediction", ex.id))
            })?;
            Ok((ex.y.index(), correct))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

/// Trains a (k+1)-output network with the surrogate loss on every row of `completed`.
pub fn train_surrogate(completed: &Dataset, config: &DeferConfig, seed: u64) -> Result<TeamModel> {
    let (y, correct) = completed_columns(completed)?;
    let x = completed.inputs(&(0..completed.len()).collect::<Vec<_>>());
    let mut network = Network::new(
        &config.backbone,
        completed.shape(),
        completed.k() + 1,
        seed::derive(seed, "surrogate"),
    );
    let mut rng = seed::rng_for(seed, "surrogate-batches");
    let mut steps = 0;
    let loss_history = fit_objective(
        &mut network,
        completed.len(),
        &config.schedule(config.epochs),
        &mut rng,
        &mut steps,
        |net, rows| {
            let xb = x.select(ndarray::Axis(0), rows);
            let yb: Vec<usize> = rows.iter().map(|&i| y[i]).collect();
            let cb: Vec<bool> = rows.iter().map(|&i| correct[i]).collect();
            let (logits, cache) = net.forward(&xb);
            let (loss, grad) = surrogate_loss(&logits, &yb, &cb, config.alpha);
            (loss, net.backward(&cache, &grad))
        },
    )?;
    Ok(TeamModel::Surrogate {
        network,
        loss_history,
    })
}

/// Pairs the classifier with an expert error model fit on the completed correctness
/// labels over frozen embedding features.
pub fn train_confidence_compare(
    completed: &Dataset,
    classifier: &EmbeddingModel,
    config: &DeferConfig,
) -> Result<TeamModel> {
    let (_, correct) = completed_columns(completed)?;
    let labels: Vec<usize> = correct.iter().map(|&c| usize::from(c)).collect();
    let backbone = classifier.network.backbone.clone();
    let positives = labels.iter().sum::<usize>();
    let head = if positives == 0 || positives == labels.len() {
        log::warn!("confidence-compare: expert correctness is constant on the completed data");
        CorrectnessHead::Constant(positives > 0)
    } else {
        let features = backbone.features(&completed.inputs(&(0..completed.len()).collect::<Vec<_>>()));
        CorrectnessHead::Softmax(train_softmax_head(&features, &labels, &config.error_model))
    };
    Ok(TeamModel::ConfidenceCompare {
        classifier: classifier.clone(),
        expert: ExpertiseModel {
            variant: ExpertiseVariant::EmbeddingNn,
            backbone,
            head,
            projection: None,
            metrics: Vec::new(),
        },
    })
}

/// Confidence-compare team using a given expertise model as the expert's confidence.
pub fn confidence_compare_with(classifier: &EmbeddingModel, expert: &ExpertiseModel) -> TeamModel {
    TeamModel::ConfidenceCompare {
        classifier: classifier.clone(),
        expert: expert.clone(),
    }
}

/// Trains the requested algorithm on a completed dataset.
pub fn train_team(
    algorithm: DeferAlgorithm,
    completed: &Dataset,
    embedding: &EmbeddingModel,
    config: &DeferConfig,
    seed: u64,
) -> Result<TeamModel> {
    match algorithm {
        DeferAlgorithm::Surrogate => train_surrogate(completed, config, seed),
        DeferAlgorithm::ConfidenceCompare => train_confidence_compare(completed, embedding, config),
        DeferAlgorithm::NllTriage => train_nll_triage(completed, config, seed),
    }
}

/// One row of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub y: usize,
    pub h: usize,
    pub deferred: bool,
    pub f_pred: usize,
    pub system_pred: usize,
}

impl PredictionRow {
    pub fn correct(&self) -> bool {
        self.system_pred == self.y
    }
}

/// Team predictions on `indices`, which must all carry the expert's real prediction.
pub fn predict_rows(
    team: &TeamModel,
    dataset: &Dataset,
    indices: &[usize],
    rule: DeferRule,
) -> Result<Vec<PredictionRow>> {
    let decisions = team.decide(&dataset.inputs(indices), rule)?;
    indices
        .iter()
        .enumerate()
        .map(|(row, &i)| {
            let ex = dataset.example(i);
            let h = ex.h.ok_or_else(|| {
                Error::Precondition(format!("evaluation instance {} has no expert prediction", ex.id))
            })?;
            let f = decisions.classifier[row];
            let deferred = decisions.deferred[row];
            Ok(PredictionRow {
                id: ex.id.clone(),
                y: ex.y.one_based(),
                h: h.one_based(),
                deferred,
                f_pred: f.one_based(),
                system_pred: team_predict(deferred, f, h).one_based(),
            })
        })
        .collect()
}

pub fn write_predictions(rows: &[PredictionRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Class probabilities of the classifier part of a team.
pub fn classifier_probabilities(team: &TeamModel, x: &Array2<f64>) -> Result<Array2<f64>> {
    team.check_input(x)?;
    Ok(match team {
        TeamModel::Surrogate { network, .. } => {
            let logits = network.logits(x);
            let k = logits.ncols() - 1;
            softmax_rows(&logits.slice(ndarray::s![.., ..k]).to_owned())
        }
        TeamModel::ConfidenceCompare { classifier, .. } => classifier.classify(x)?.probabilities,
        TeamModel::Triage { classifier, .. } => softmax_rows(&classifier.logits(x)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surrogate_loss_on_uniform_logits() {
        let logits = Array2::zeros((1, 3));
        let (with, _) = surrogate_loss(&logits, &[0], &[true], 1.0);
        assert!((with - 2.0 * 3f64.ln()).abs() < 1e-12);
        let (without, _) = surrogate_loss(&logits, &[0], &[false], 1.0);
        assert!((without - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn team_prediction_identity() {
        assert_eq!(team_predict(true, Class(0), Class(2)), Class(2));
        assert_eq!(team_predict(false, Class(0), Class(2)), Class(0));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in DeferAlgorithm::ALL {
            assert_eq!(DeferAlgorithm::parse(a.name()), Some(a));
        }
    }
}
