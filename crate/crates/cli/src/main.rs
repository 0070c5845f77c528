use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use l2d_core::artificial::complete_dataset;
use l2d_core::dataset::{
    generate_cifar_style, generate_nih_style, load_manifest, resolve_data_path,
    sample_labeled_subset, save_manifest, split_train_test, CifarStyleConfig, Dataset,
    DatasetSplit, Fold, NihStyleConfig, TrainTest, DATA_ROOT_ENV,
};
use l2d_core::defer::{predict_rows, train_team, write_predictions, DeferAlgorithm, DeferConfig, DeferRule, TeamModel};
use l2d_core::embedding::{train_embedding, EmbeddingConfig, EmbeddingModel};
use l2d_core::eval::{bias_report, coverage, f_beta, system_accuracy};
use l2d_core::experiment::{
    apply_override, build_synthetic_expert, emit_plots_from_dir, run_pipeline,
    with_synthetic_predictions, RunConfig,
};
use l2d_core::expertise::{train_expertise, ExpertiseConfig, ExpertiseModel, ExpertiseVariant};

#[derive(Parser)]
#[command(name = "l2d", version, about = "Learning to defer with few expert predictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Hyperparameter sources shared by the training subcommands.
#[derive(clap::Args)]
struct Hyper {
    /// Run config whose matching section supplies the hyperparameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a hyperparameter, `key=value` within the section (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    CifarStyle,
    NihStyle,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as a manifest with train/test folds.
    PrepareData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        out: PathBuf,
        /// Generator setting, `key=value` (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Test share for datasets generated without folds.
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Train the embedding model on the training fold.
    TrainEmbedding {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        hyper: Hyper,
    },
    /// Draw a synthetic expert and write the manifest with its predictions.
    GenExpert {
        #[arg(long)]
        manifest: PathBuf,
        /// Embedding whose features define subclass similarity.
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long, default_value_t = 0.6)]
        strength_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expert record (base, strengths, seed).
        #[arg(long)]
        expert_out: PathBuf,
        /// Manifest with the expert column filled in.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample m expert predictions per class and train an expertise predictor.
    TrainExpertise {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: ExpertiseVariant,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the labeled/unlabeled/test split.
        #[arg(long)]
        split_out: PathBuf,
        #[command(flatten)]
        hyper: Hyper,
    },
    /// Complete the training set with artificial expert predictions.
    GenLabels {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        expertise: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a learning-to-defer model on a completed manifest.
    TrainDefer {
        /// Completed training manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long, value_parser = parse_algorithm)]
        algorithm: DeferAlgorithm,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: Hyper,
    },
    /// Evaluate a team on the test fold (system accuracy, coverage, subgroup metrics).
    Evaluate {
        /// Manifest carrying the real expert predictions.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        team: PathBuf,
        /// Optional expertise model to score with F0.5 against the real predictions.
        #[arg(long)]
        expertise: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Force the deferral decision instead of using the learned one.
        #[arg(long, value_parser = ["never", "always"])]
        force: Option<String>,
    },
    /// Render figures from the tables of a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run a whole grid from a config file, then plot.
    RunAll {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, `section.key=value` (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory; replaces `output` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<ExpertiseVariant, String> {
    ExpertiseVariant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ExpertiseVariant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant `{s}`; expected one of {}", names.join(", "))
    })
}

fn parse_algorithm(s: &str) -> Result<DeferAlgorithm, String> {
    DeferAlgorithm::parse(s).ok_or_else(|| {
        let names: Vec<&str> = DeferAlgorithm::ALL.iter().map(|a| a.name()).collect();
        format!("unknown algorithm `{s}`; expected one of {}", names.join(", "))
    })
}

/// Default value of `T`, patched by a config section and then by overrides.
fn configure<T: Serialize + DeserializeOwned + Default>(
    config: Option<&Path>,
    section: &[&str],
    overrides: &[String],
) -> Result<T> {
    let mut table = match toml::Value::try_from(T::default())? {
        toml::Value::Table(t) => t,
        _ => bail!("configuration section is not a table"),
    };
    if let Some(path) = config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut node: toml::Value = toml::from_str::<toml::Table>(&text)?.into();
        for key in section {
            node = match node.get(*key) {
                Some(v) => v.clone(),
                None => toml::Value::Table(toml::Table::new()),
            };
        }
        if let toml::Value::Table(t) = node {
            merge(&mut table, t);
        }
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Ok(toml::Value::Table(table).try_into()?)
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn load(path: &Path) -> Result<Dataset> {
    let path = resolve_data_path(path);
    load_manifest(&path).with_context(|| format!("loading manifest {}", path.display()))
}

fn folds(dataset: &Dataset) -> Result<TrainTest> {
    TrainTest::from_folds(dataset).context("manifest needs a fold column; create it with prepare-data")
}

fn with_folds(dataset: Dataset, test_fraction: f64, split_seed: u64) -> Result<Dataset> {
    if dataset.examples().iter().all(|e| e.fold.is_some()) {
        return Ok(dataset);
    }
    let group = dataset
        .examples()
        .iter()
        .all(|e| e.meta("patient_id").is_some())
        .then_some("patient_id");
    let split = split_train_test(&dataset, test_fraction, group, split_seed)?;
    let mut examples = dataset.examples().to_vec();
    for &i in &split.train {
        examples[i].fold = Some(Fold::Train);
    }
    for &i in &split.test {
        examples[i].fold = Some(Fold::Test);
    }
    Ok(Dataset::new(
        examples,
        dataset.taxonomy().clone(),
        dataset.shape(),
        dataset.root().to_path_buf(),
    )?)
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::PrepareData {
            kind,
            out,
            set,
            test_fraction,
            split_seed,
        } => {
            let dataset = match kind {
                DataKind::CifarStyle => generate_cifar_style(&configure::<CifarStyleConfig>(None, &[], &set)?)?,
                DataKind::NihStyle => generate_nih_style(&configure::<NihStyleConfig>(None, &[], &set)?)?,
            };
            let dataset = with_folds(dataset, test_fraction, split_seed)?;
            save_manifest(&dataset, &out)?;
            let f = folds(&dataset)?;
            println!(
                "wrote {} ({} train / {} test, k = {})",
                out.display(),
                f.train.len(),
                f.test.len(),
                dataset.k()
            );
        }
        Command::TrainEmbedding {
            manifest,
            out,
            seed,
            hyper,
        } => {
            let dataset = load(&manifest)?;
            let f = folds(&dataset)?;
            let mut cfg: EmbeddingConfig = configure(hyper.config.as_deref(), &["embedding"], &hyper.set)?;
            cfg.seed = seed;
            let model = train_embedding(&dataset, &f.train, &cfg)?;
            model.save(&out)?;
            println!(
                "classifier accuracy on test: {:.4}",
                model.accuracy(&dataset, &f.test)?
            );
        }
        Command::GenExpert {
            manifest,
            embedding,
            strength_fraction,
            seed,
            expert_out,
            out,
        } => {
            let dataset = load(&manifest)?;
            let f = folds(&dataset)?;
            let emb = EmbeddingModel::load(&embedding)?;
            let expert = build_synthetic_expert(&dataset, &f.train, &emb, strength_fraction, seed)?;
            expert.save(&expert_out)?;
            let with = with_synthetic_predictions(&dataset, &expert)?;
            save_manifest(&with, &out)?;
            let correct = f.test.iter().filter(|&&i| with.example(i).expert_correct() == Some(true)).count();
            println!(
                "expert accuracy on test: {:.4}",
                correct as f64 / f.test.len().max(1) as f64
            );
        }
        Command::TrainExpertise {
            manifest,
            embedding,
            variant,
            m,
            seed,
            out,
            split_out,
            hyper,
        } => {
            let dataset = load(&manifest)?;
            let f = folds(&dataset)?;
            let emb = EmbeddingModel::load(&embedding)?;
            let cfg: ExpertiseConfig = configure(hyper.config.as_deref(), &["expertise"], &hyper.set)?;
            let split = sample_labeled_subset(&dataset, &f, m, seed)?;
            let model = train_expertise(variant, &dataset, &split, &emb, &cfg, seed)?;
            model.save(&out)?;
            split.save(&dataset, &split_out)?;
            println!("F0.5 on test: {:.4}", expertise_f05(&model, &dataset, &f.test)?);
        }
        Command::GenLabels {
            manifest,
            split,
            expertise,
            seed,
            out,
        } => {
            let dataset = load(&manifest)?;
            let split = DatasetSplit::load(&dataset, &split)?;
            let model = ExpertiseModel::load(&expertise)?;
            let completed = complete_dataset(&dataset, &split, &model, seed)?;
            save_manifest(&completed, &out)?;
            println!(
                "wrote {} ({} real, {} artificial expert predictions)",
                out.display(),
                split.l(),
                split.u()
            );
        }
        Command::TrainDefer {
            manifest,
            embedding,
            algorithm,
            seed,
            out,
            hyper,
        } => {
            let completed = load(&manifest)?;
            let emb = EmbeddingModel::load(&embedding)?;
            let cfg: DeferConfig = configure(hyper.config.as_deref(), &["defer"], &hyper.set)?;
            let team = train_team(algorithm, &completed, &emb, &cfg, seed)?;
            team.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            manifest,
            team,
            expertise,
            predictions,
            force,
        } => {
            let dataset = load(&manifest)?;
            let f = folds(&dataset)?;
            let team = TeamModel::load(&team)?;
            let rule = match force.as_deref() {
                Some("never") => DeferRule::Never,
                Some("always") => DeferRule::Always,
                _ => DeferRule::Learned,
            };
            let rows = predict_rows(&team, &dataset, &f.test, rule)?;
            if let Some(p) = &predictions {
                write_predictions(&rows, p)?;
            }
            let mut report = serde_json::json!({
                "algorithm": team.algorithm().name(),
                "system_accuracy": system_accuracy(&rows),
                "coverage": coverage(&rows),
            });
            if let Some(path) = expertise {
                let model = ExpertiseModel::load(&path)?;
                report["f05"] = expertise_f05(&model, &dataset, &f.test)?.into();
            }
            if f.test.iter().any(|&i| dataset.example(i).meta("gender").is_some()) {
                report["bias"] = serde_json::to_value(bias_report(&rows, &dataset)?)?;
            }
            print_json(&report)?;
        }
        Command::Plot { run } => {
            for path in emit_plots_from_dir(&run)? {
                println!("{}", path.display());
            }
        }
        Command::RunAll { config, set, out } => {
            let mut set = set;
            if let Some(out) = out {
                set.push(format!("output={}", out.display()));
            }
            let cfg = RunConfig::load(&config, &set)?;
            let report = run_pipeline(&cfg)?;
            println!(
                "{}: {} metric rows, {} expertise rows, {} failures (config {})",
                cfg.output.display(),
                report.metrics.len(),
                report.expertise.len(),
                report.failures.len(),
                report.config_fp
            );
            if !report.metrics.is_empty() {
                for path in emit_plots_from_dir(&cfg.output)? {
                    println!("{}", path.display());
                }
            }
            if !report.failures.is_empty() {
                eprintln!("failed cells:");
                for f in &report.failures {
                    eprintln!(
                        "  {} expert={} seed={} m={} variant={} algorithm={}: {}",
                        f.stage,
                        f.expert,
                        f.seed,
                        f.m.map(|m| m.to_string()).unwrap_or_else(|| "-".into()),
                        f.variant,
                        f.algorithm,
                        f.error
                    );
                }
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn expertise_f05(model: &ExpertiseModel, dataset: &Dataset, test: &[usize]) -> Result<f64> {
    let truth = test
        .iter()
        .map(|&i| {
            dataset.example(i).expert_correct().with_context(|| {
                format!("test instance {} has no expert prediction", dataset.example(i).id)
            })
        })
        .collect::<Result<Vec<bool>>>()?;
    let pred: Vec<bool> = model
        .predict_correctness(&dataset.inputs(test))?
        .iter()
        .map(|p| p.correct)
        .collect();
    Ok(f_beta(&pred, &truth, 0.5)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    log::debug!("data root from ${DATA_ROOT_ENV}: {:?}", std::env::var_os(DATA_ROOT_ENV));
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
