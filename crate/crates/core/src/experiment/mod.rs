//! Experiment grid: configuration, the end-to-end runner, result tables and figures.
//!
//! A run loops over experts, seeds, budgets, expertise variants and deferral
//! algorithms. Every cell is isolated: an error is written to the failure table and
//! the grid moves on. Result rows are appended as soon as a seed finishes so an
//! interrupted grid keeps what it produced.

mod config;
mod plot;
mod tables;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

pub use config::{apply_override, DataConfig, ExpertKind, ExpertSpec, GridConfig, RunConfig};
pub use plot::{emit_plots, emit_plots_from_dir};
pub use tables::{
    append_rows, read_rows, write_rows, BoundaryRecord, ExpertiseRecord, FailureRecord,
    BOUNDARIES, EXPERTISE, FAILURES, METRICS, SUMMARY,
};

use crate::artificial::complete_dataset;
use crate::dataset::{
    generate_cifar_style, generate_nih_style, load_manifest, resolve_data_path,
    sample_labeled_subset, split_train_test, Dataset, Provenance, TrainTest,
};
use crate::defer::{predict_rows, train_team, write_predictions, DeferAlgorithm, DeferRule, TeamModel};
use crate::embedding::{train_embedding, EmbeddingConfig, EmbeddingModel};
use crate::error::{Error, Result};
use crate::eval::{
    bias_report, boundaries, coverage, f_beta, relative_performance, summarize, system_accuracy,
    MetricRecord,
};
use crate::expertise::{train_expertise, ExpertiseVariant};
use crate::seed;
use crate::synthetic_expert::{build_similarity_matrix, sample_strength_set, SyntheticExpert};

/// Loads or generates the dataset and its train/test partition.
pub fn load_data(data: &DataConfig) -> Result<(Dataset, TrainTest)> {
    let dataset = if let Some(path) = &data.manifest {
        load_manifest(&resolve_data_path(path))?
    } else if let Some(c) = &data.cifar_style {
        generate_cifar_style(c)?
    } else if let Some(c) = &data.nih_style {
        generate_nih_style(c)?
    } else {
        return Err(Error::Config("no data source configured".into()));
    };
    let folds = if dataset.examples().iter().all(|e| e.fold.is_some()) {
        TrainTest::from_folds(&dataset)?
    } else {
        split_train_test(
            &dataset,
            data.test_fraction,
            data.group_key.as_deref(),
            data.split_seed,
        )?
    };
    Ok((dataset, folds))
}

/// Embedding models keyed on (dataset, embedding config, seed), in memory and
/// optionally on disk.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    dir: Option<PathBuf>,
    models: HashMap<String, EmbeddingModel>,
    /// Number of models actually trained.
    pub trained: usize,
}

impl EmbeddingCache {
    pub fn new(dir: Option<PathBuf>) -> EmbeddingCache {
        EmbeddingCache {
            dir,
            ..EmbeddingCache::default()
        }
    }

    pub fn key(dataset: &Dataset, config: &EmbeddingConfig, seed: u64) -> String {
        let c = EmbeddingConfig {
            seed,
            ..config.clone()
        };
        let text = format!(
            "{}/{}",
            dataset.fingerprint(),
            serde_json::to_string(&c).expect("config serializes")
        );
        seed::fingerprint(text.as_bytes())
    }

    pub fn get(
        &mut self,
        dataset: &Dataset,
        train: &[usize],
        config: &EmbeddingConfig,
        seed: u64,
    ) -> Result<EmbeddingModel> {
        let key = Self::key(dataset, config, seed);
        if let Some(m) = self.models.get(&key) {
            return Ok(m.clone());
        }
        let path = self.dir.as_ref().map(|d| d.join(format!("embedding-{key}.json")));
        let model = match &path {
            Some(p) if p.exists() => EmbeddingModel::load(p)?,
            _ => {
                let cfg = EmbeddingConfig {
                    seed,
                    ..config.clone()
                };
                let m = train_embedding(dataset, train, &cfg)?;
                self.trained += 1;
                if let Some(p) = &path {
                    create_parent(p)?;
                    m.save(p)?;
                }
                m
            }
        };
        self.models.insert(key, model.clone());
        Ok(model)
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Similarity from `embedding` features of the training rows, then a strength draw
/// covering `strength_fraction` of the subclasses.
pub fn build_synthetic_expert(
    dataset: &Dataset,
    train: &[usize],
    embedding: &EmbeddingModel,
    strength_fraction: f64,
    seed: u64,
) -> Result<SyntheticExpert> {
    let features = embedding.extract_features(&dataset.inputs(train))?;
    let subs = train
        .iter()
        .map(|&i| {
            let ex = dataset.example(i);
            ex.y_sub
                .ok_or_else(|| Error::Precondition(format!("{} has no subclass label", ex.id)))
        })
        .collect::<Result<Vec<usize>>>()?;
    let k_sub = dataset.taxonomy().k_sub();
    let similarity = build_similarity_matrix(&features, &subs, k_sub)?;
    let n = ((k_sub as f64 * strength_fraction).round() as usize).clamp(1, k_sub);
    sample_strength_set(&similarity, dataset.taxonomy(), n, seed)
}

/// Dataset with the expert's predictions on every row.
pub fn with_synthetic_predictions(dataset: &Dataset, expert: &SyntheticExpert) -> Result<Dataset> {
    let h = expert.predict_dataset(dataset)?;
    dataset.with_expert(
        h.into_iter()
            .enumerate()
            .map(|(i, c)| (i, Some(c), Some(Provenance::Real)))
            .collect::<Vec<_>>(),
    )
}

/// Training rows with their real expert predictions.
pub fn fully_labeled(dataset: &Dataset, folds: &TrainTest) -> Result<Dataset> {
    for &i in &folds.train {
        if dataset.example(i).h.is_none() {
            return Err(Error::Precondition(format!(
                "training instance {} has no expert prediction",
                dataset.example(i).id
            )));
        }
    }
    dataset.subset(&folds.train)
}

/// Everything a run produced, in grid order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub config_fp: String,
    pub metrics: Vec<MetricRecord>,
    pub expertise: Vec<ExpertiseRecord>,
    pub boundaries: Vec<BoundaryRecord>,
    pub failures: Vec<FailureRecord>,
    /// Embedding models trained rather than taken from the cache.
    pub embeddings_trained: usize,
}

impl RunReport {
    fn extend(&mut self, other: RunReport) {
        self.metrics.extend(other.metrics);
        self.expertise.extend(other.expertise);
        self.boundaries.extend(other.boundaries);
        self.failures.extend(other.failures);
    }

    fn append_to(&self, dir: &Path) -> Result<()> {
        append_rows(&dir.join(METRICS), &self.metrics)?;
        append_rows(&dir.join(EXPERTISE), &self.expertise)?;
        append_rows(&dir.join(BOUNDARIES), &self.boundaries)?;
        append_rows(&dir.join(FAILURES), &self.failures)
    }
}

struct Cell<'a> {
    config: &'a RunConfig,
    fp: &'a str,
    expert: &'a str,
    seed: u64,
}

impl Cell<'_> {
    fn failure(
        &self,
        stage: &str,
        m: Option<usize>,
        variant: Option<ExpertiseVariant>,
        algorithm: Option<DeferAlgorithm>,
        error: &Error,
    ) -> FailureRecord {
        log::warn!(
            "{stage} failed (expert {}, seed {}, m {m:?}, {variant:?}, {algorithm:?}): {error}",
            self.expert,
            self.seed
        );
        FailureRecord {
            stage: stage.into(),
            expert: self.expert.into(),
            seed: self.seed,
            m,
            variant: variant.map(|v| v.name().to_string()).unwrap_or_default(),
            algorithm: algorithm.map(|a| a.name().to_string()).unwrap_or_default(),
            error: error.to_string(),
            config_fp: self.fp.into(),
        }
    }

    fn model_dir(&self) -> Option<PathBuf> {
        self.config.grid.save_models.then(|| {
            self.config
                .output
                .join("models")
                .join(self.expert)
                .join(format!("seed{}", self.seed))
        })
    }
}

fn has_bias_metadata(dataset: &Dataset, rows: &[usize]) -> bool {
    rows.iter().any(|&i| {
        let ex = dataset.example(i);
        ex.meta("gender").is_some() || ex.meta("age").is_some()
    })
}

/// One seed of one expert: boundaries, then every (m, variant, algorithm) cell.
fn run_seed(
    cell: &Cell<'_>,
    dataset: &Dataset,
    folds: &TrainTest,
    embedding: &EmbeddingModel,
) -> RunReport {
    let config = cell.config;
    let grid = &config.grid;
    let mut report = RunReport::default();

    let base = match boundaries(dataset, &folds.test, embedding, None) {
        Ok(b) => b,
        Err(e) => {
            report.failures.push(cell.failure("boundaries", None, None, None, &e));
            return report;
        }
    };
    let boundary = |algorithm: &str, complete: Option<f64>| BoundaryRecord {
        dataset: config.name.clone(),
        expert: cell.expert.into(),
        seed: cell.seed,
        algorithm: algorithm.into(),
        classifier_alone: base.classifier_alone,
        expert_alone: base.expert_alone,
        complete,
        config_fp: cell.fp.into(),
    };
    report.boundaries.push(boundary("", None));

    let mut complete: HashMap<DeferAlgorithm, f64> = HashMap::new();
    if grid.complete_boundary && !grid.algorithms.is_empty() {
        match fully_labeled(dataset, folds) {
            Ok(full) => {
                for &alg in &grid.algorithms {
                    let acc = train_team(alg, &full, embedding, &config.defer, cell.seed).and_then(
                        |team| {
                            save_team(cell, &team, None, None)?;
                            predict_rows(&team, dataset, &folds.test, DeferRule::Learned)
                                .map(|r| system_accuracy(&r))
                        },
                    );
                    match acc {
                        Ok(a) => {
                            complete.insert(alg, a);
                            report.boundaries.push(boundary(alg.name(), Some(a)));
                        }
                        Err(e) => report
                            .failures
                            .push(cell.failure("complete", None, None, Some(alg), &e)),
                    }
                }
            }
            Err(e) => report.failures.push(cell.failure("complete", None, None, None, &e)),
        }
    }

    let bias = has_bias_metadata(dataset, &folds.test);
    let truth: Vec<bool> = folds
        .test
        .iter()
        .map(|&i| dataset.example(i).expert_correct().unwrap_or(false))
        .collect();

    for &m in &grid.budgets {
        let split = match sample_labeled_subset(dataset, folds, m, cell.seed) {
            Ok(s) => s,
            Err(e) => {
                report.failures.push(cell.failure("split", Some(m), None, None, &e));
                continue;
            }
        };
        for &variant in &grid.variants {
            let fail = |stage: &str, alg: Option<DeferAlgorithm>, e: &Error| {
                cell.failure(stage, Some(m), Some(variant), alg, e)
            };
            let model = match train_expertise(
                variant,
                dataset,
                &split,
                embedding,
                &config.expertise,
                cell.seed,
            ) {
                Ok(model) => model,
                Err(e) => {
                    report.failures.push(fail("expertise", None, &e));
                    continue;
                }
            };
            let scored = model
                .predict_correctness(&dataset.inputs(&folds.test))
                .and_then(|p| {
                    let pred: Vec<bool> = p.iter().map(|p| p.correct).collect();
                    let share = pred.iter().filter(|c| **c).count() as f64 / pred.len().max(1) as f64;
                    Ok((f_beta(&pred, &truth, 0.5)?, share))
                });
            let (f05, share) = match scored {
                Ok(s) => s,
                Err(e) => {
                    report.failures.push(fail("expertise", None, &e));
                    continue;
                }
            };
            report.expertise.push(ExpertiseRecord {
                dataset: config.name.clone(),
                expert: cell.expert.into(),
                variant: variant.name().into(),
                m,
                l: split.l(),
                seed: cell.seed,
                f05,
                predicted_correct: share,
                config_fp: cell.fp.into(),
            });
            if let Some(dir) = cell.model_dir() {
                let dir = dir.join(format!("m{m}")).join(variant.name());
                let saved = fs::create_dir_all(&dir)
                    .map_err(|e| Error::io(&dir, e))
                    .and_then(|_| model.save(&dir.join("expertise.json")))
                    .and_then(|_| split.save(dataset, &dir.join("split.txt")));
                if let Err(e) = saved {
                    report.failures.push(fail("save", None, &e));
                }
            }
            if grid.algorithms.is_empty() {
                continue;
            }
            let completed = match complete_dataset(dataset, &split, &model, cell.seed) {
                Ok(c) => c,
                Err(e) => {
                    report.failures.push(fail("labels", None, &e));
                    continue;
                }
            };
            for &alg in &grid.algorithms {
                let evaluated = train_team(alg, &completed, embedding, &config.defer, cell.seed)
                    .and_then(|team| {
                        let rows = predict_rows(&team, dataset, &folds.test, DeferRule::Learned)?;
                        save_team(cell, &team, Some((m, variant)), Some(&rows))?;
                        let report = if bias {
                            Some(bias_report(&rows, dataset)?)
                        } else {
                            None
                        };
                        Ok((rows, report))
                    });
                let (rows, bias_report) = match evaluated {
                    Ok(r) => r,
                    Err(e) => {
                        report.failures.push(fail("defer", Some(alg), &e));
                        continue;
                    }
                };
                let acc = system_accuracy(&rows);
                report.metrics.push(MetricRecord {
                    dataset: config.name.clone(),
                    expert: cell.expert.into(),
                    algorithm: alg.name().into(),
                    variant: variant.name().into(),
                    m,
                    l: split.l(),
                    seed: cell.seed,
                    system_accuracy: acc,
                    coverage: coverage(&rows),
                    f05,
                    relative_performance: complete
                        .get(&alg)
                        .and_then(|&c| relative_performance(acc, c).ok()),
                    gender_gap: bias_report.as_ref().map(|b| b.gender_gap),
                    age_mad: bias_report.as_ref().map(|b| b.age_mad),
                    config_fp: cell.fp.into(),
                });
            }
        }
    }
    report
}

fn save_team(
    cell: &Cell<'_>,
    team: &TeamModel,
    budget: Option<(usize, ExpertiseVariant)>,
    rows: Option<&[crate::defer::PredictionRow]>,
) -> Result<()> {
    let Some(dir) = cell.model_dir() else {
        return Ok(());
    };
    let dir = match budget {
        Some((m, variant)) => dir.join(format!("m{m}")).join(variant.name()),
        None => dir.join("complete"),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = team.algorithm().name();
    team.save(&dir.join(format!("{name}.json")))?;
    if let Some(rows) = rows {
        write_predictions(rows, &dir.join(format!("{name}.predictions.csv")))?;
    }
    Ok(())
}

/// Runs the whole grid described by `config`, appending to the tables in
/// `config.output` as it goes and rewriting the summary table at the end.
///
/// Errors are returned only for problems that stop the grid before any cell runs
/// (unreadable data, unwritable output). Cell errors land in `RunReport::failures`.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let out = &config.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let fp = config.fingerprint();
    let resolved = format!("# config fingerprint {fp}\n{}", config.to_toml()?);
    let config_path = out.join("config.toml");
    fs::write(&config_path, resolved).map_err(|e| Error::io(&config_path, e))?;

    let (dataset, folds) = load_data(&config.data)?;
    log::info!(
        "{}: {} train / {} test rows, k = {}",
        config.name,
        folds.train.len(),
        folds.test.len(),
        dataset.k()
    );
    let mut cache = EmbeddingCache::new(Some(out.join("cache")));
    let mut report = RunReport {
        config_fp: fp.clone(),
        ..RunReport::default()
    };

    for spec in &config.experts {
        let staged = Cell {
            config,
            fp: &fp,
            expert: &spec.name,
            seed: spec.seed,
        };
        let with_expert = match spec.kind {
            ExpertKind::Real => fully_labeled(&dataset, &TrainTest {
                train: (0..dataset.len()).collect(),
                test: Vec::new(),
            })
            .map(|_| dataset.clone()),
            ExpertKind::Synthetic => cache
                .get(&dataset, &folds.train, &config.embedding, spec.seed)
                .and_then(|emb| {
                    build_synthetic_expert(&dataset, &folds.train, &emb, spec.strength_fraction, spec.seed)
                })
                .and_then(|expert| {
                    let path = out.join("experts").join(format!("{}.txt", spec.name));
                    create_parent(&path)?;
                    expert.save(&path)?;
                    with_synthetic_predictions(&dataset, &expert)
                }),
        };
        let with_expert = match with_expert {
            Ok(d) => d,
            Err(e) => {
                let f = staged.failure("expert", None, None, None, &e);
                append_rows(&out.join(FAILURES), std::slice::from_ref(&f))?;
                report.failures.push(f);
                continue;
            }
        };

        for &s in &config.grid.seeds {
            let cell = Cell {
                seed: s,
                ..staged
            };
            let part = match cache.get(&with_expert, &folds.train, &config.embedding, s) {
                Ok(embedding) => run_seed(&cell, &with_expert, &folds, &embedding),
                Err(e) => RunReport {
                    failures: vec![cell.failure("embedding", None, None, None, &e)],
                    ..RunReport::default()
                },
            };
            part.append_to(out)?;
            report.extend(part);
        }
    }
    report.embeddings_trained = cache.trained;
    write_rows(&out.join(SUMMARY), &summarize(&report.metrics))?;
    Ok(report)
}
