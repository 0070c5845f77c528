//! Expertise predictor: learns from a few expert predictions whether the expert is
//! correct on an instance.

mod ssl;
mod supervised;

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use ssl::{
    comatch_graphs, comatch_loss, fixmatch_loss, train_ssl, EpochMetrics, LossTerms,
    MemoryBank, MemoryUpdate, SslBatch, SslConfig, SslMethod, SslModel,
};
pub use supervised::{fit_linear_softmax, train_max_margin, train_softmax_head, MaxMargin, SupervisedConfig};

use crate::augment::AugmentationPolicy;
use crate::dataset::{Class, Dataset, DatasetSplit};
use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Backbone, BackboneConfig, Linear, Mlp};
use crate::seed;

/// 1 if the expert's prediction equals the true class, else 0.
pub fn binarize(h: Class, y: Class, k: usize) -> Result<usize> {
    if h.index() >= k || y.index() >= k {
        return Err(Error::Precondition(format!(
            "class out of range 1..={k}: h={h}, y={y}"
        )));
    }
    Ok(usize::from(h == y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpertiseVariant {
    /// FixMatch on the frozen embedding.
    #[serde(rename = "embedding-fixmatch")]
    EmbeddingFixMatch,
    /// CoMatch on the frozen embedding.
    #[serde(rename = "embedding-comatch")]
    EmbeddingCoMatch,
    /// Single-layer softmax head on embedding features.
    #[serde(rename = "embedding-nn")]
    EmbeddingNn,
    /// Linear max-margin head on embedding features.
    #[serde(rename = "embedding-svm")]
    EmbeddingSvm,
    /// FixMatch training its own backbone from raw inputs.
    #[serde(rename = "fixmatch")]
    FixMatch,
    /// CoMatch training its own backbone from raw inputs.
    #[serde(rename = "comatch")]
    CoMatch,
}

impl ExpertiseVariant {
    pub const ALL: [ExpertiseVariant; 6] = [
        ExpertiseVariant::EmbeddingFixMatch,
        ExpertiseVariant::EmbeddingCoMatch,
        ExpertiseVariant::EmbeddingNn,
        ExpertiseVariant::EmbeddingSvm,
        ExpertiseVariant::FixMatch,
        ExpertiseVariant::CoMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExpertiseVariant::EmbeddingFixMatch => "embedding-fixmatch",
            ExpertiseVariant::EmbeddingCoMatch => "embedding-comatch",
            ExpertiseVariant::EmbeddingNn => "embedding-nn",
            ExpertiseVariant::EmbeddingSvm => "embedding-svm",
            ExpertiseVariant::FixMatch => "fixmatch",
            ExpertiseVariant::CoMatch => "comatch",
        }
    }

    pub fn parse(text: &str) -> Option<ExpertiseVariant> {
        Self::ALL.into_iter().find(|v| v.name() == text)
    }

    pub fn uses_unlabeled(self) -> bool {
        !matches!(self, ExpertiseVariant::EmbeddingNn | ExpertiseVariant::EmbeddingSvm)
    }
}

impl std::fmt::Display for ExpertiseVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertiseConfig {
    pub ssl: SslConfig,
    pub supervised: SupervisedConfig,
    /// Overrides the payload-dependent default policy.
    pub augmentation: Option<AugmentationPolicy>,
    /// Backbone for the raw-input variants; defaults to the embedding model's.
    pub raw_backbone: Option<BackboneConfig>,
}

impl Default for ExpertiseConfig {
    fn default() -> Self {
        ExpertiseConfig {
            ssl: SslConfig::default(),
            supervised: SupervisedConfig::default(),
            augmentation: None,
            raw_backbone: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CorrectnessHead {
    Softmax(Linear),
    MaxMargin(MaxMargin),
    /// Degenerate fit on single-class labels.
    Constant(bool),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertiseModel {
    pub variant: ExpertiseVariant,
    pub backbone: Backbone,
    pub head: CorrectnessHead,
    pub projection: Option<Mlp>,
    pub metrics: Vec<EpochMetrics>,
}

/// Binary expertise prediction for one instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessPrediction {
    pub correct: bool,
    /// Probability of the predicted binary class.
    pub confidence: f64,
    /// Probability that the expert is correct.
    pub p_correct: f64,
}

impl CorrectnessPrediction {
    /// From the probability of "correct"; an exact tie predicts "incorrect".
    pub fn from_p_correct(p: f64) -> CorrectnessPrediction {
        let correct = p > 0.5;
        CorrectnessPrediction {
            correct,
            confidence: if correct { p } else { 1.0 - p },
            p_correct: p,
        }
    }
}

impl ExpertiseModel {
    pub fn p_correct(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.backbone.input_len() {
            return Err(Error::Input(format!(
                "payload length {} does not match model input {}",
                x.ncols(),
                self.backbone.input_len()
            )));
        }
        Ok(match &self.head {
            CorrectnessHead::Constant(c) => vec![if *c { 1.0 } else { 0.0 }; x.nrows()],
            CorrectnessHead::Softmax(head) => {
                let p = softmax_rows(&head.forward(&self.backbone.features(x)));
                p.column(1).to_vec()
            }
            CorrectnessHead::MaxMargin(svm) => svm
                .margins(&self.backbone.features(x))
                .into_iter()
                .map(|m| 1.0 / (1.0 + (-m).exp()))
                .collect(),
        })
    }

    pub fn predict_correctness(&self, x: &Array2<f64>) -> Result<Vec<CorrectnessPrediction>> {
        Ok(self
            .p_correct(x)?
            .into_iter()
            .map(CorrectnessPrediction::from_p_correct)
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ExpertiseModel> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Binary expert labels of the labeled rows; every labeled row must carry `h`.
pub fn binary_labels(dataset: &Dataset, labeled: &[usize]) -> Result<Vec<usize>> {
    labeled
        .iter()
        .map(|&i| {
            let ex = dataset.example(i);
            let h = ex.h.ok_or_else(|| {
                Error::Precondition(format!("labeled instance {} has no expert prediction", ex.id))
            })?;
            binarize(h, ex.y, dataset.k())
        })
        .collect()
}

/// Trains the requested expertise predictor from the split's labeled rows (with their
/// expert predictions) and, for semi-supervised variants, the unlabeled inputs.
pub fn train_expertise(
    variant: ExpertiseVariant,
    dataset: &Dataset,
    split: &DatasetSplit,
    embedding: &EmbeddingModel,
    config: &ExpertiseConfig,
    seed: u64,
) -> Result<ExpertiseModel> {
    if split.labeled.is_empty() {
        return Err(Error::Precondition("no expert-labeled instances".into()));
    }
    let labels = binary_labels(dataset, &split.labeled)?;
    let xl = dataset.inputs(&split.labeled);
    let frozen = embedding.network.backbone.clone();

    if !variant.uses_unlabeled() {
        let positives = labels.iter().filter(|&&l| l == 1).count();
        let head = if positives == 0 || positives == labels.len() {
            log::warn!(
                "{variant}: all {} labeled instances have the same expert correctness; returning a constant predictor",
                labels.len()
            );
            CorrectnessHead::Constant(positives > 0)
        } else {
            let f = frozen.features(&xl);
            match variant {
                ExpertiseVariant::EmbeddingNn => {
                    CorrectnessHead::Softmax(train_softmax_head(&f, &labels, &config.supervised))
                }
                _ => CorrectnessHead::MaxMargin(train_max_margin(&f, &labels, &config.supervised)),
            }
        };
        return Ok(ExpertiseModel {
            variant,
            backbone: frozen,
            head,
            projection: None,
            metrics: Vec::new(),
        });
    }

    let (backbone, train_backbone) = match variant {
        ExpertiseVariant::FixMatch | ExpertiseVariant::CoMatch => {
            let cfg = config
                .raw_backbone
                .clone()
                .unwrap_or_else(|| embedding.config.backbone.clone());
            (Backbone::new(&cfg, dataset.shape(), seed::derive(seed, "raw-backbone")), true)
        }
        _ => (frozen, false),
    };
    let method = match variant {
        ExpertiseVariant::EmbeddingCoMatch | ExpertiseVariant::CoMatch => SslMethod::CoMatch,
        _ => SslMethod::FixMatch,
    };
    let mut rng = seed::rng_for(seed, "expertise-init");
    let d = backbone.feature_dim();
    let projection = (method == SslMethod::CoMatch).then(|| {
        Mlp::new(
            &mut rng,
            d,
            &[config.ssl.projection_hidden],
            config.ssl.projection_dim,
        )
    });
    let model = SslModel {
        backbone,
        train_backbone,
        head: Linear::zeros(d, 2),
        projection,
    };
    let policy = config
        .augmentation
        .clone()
        .unwrap_or_else(|| AugmentationPolicy::default_for(dataset.shape()));
    let xu = dataset.inputs(&split.unlabeled);
    let (trained, metrics) = train_ssl(method, model, &xl, &labels, &xu, &policy, &config.ssl, seed)?;
    Ok(ExpertiseModel {
        variant,
        backbone: trained.backbone,
        head: CorrectnessHead::Softmax(trained.head),
        projection: trained.projection,
        metrics,
    })
}
