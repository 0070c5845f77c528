use std::path::Path;

use l2d_core::eval::MetricRecord;
use l2d_core::experiment::{emit_plots_from_dir, read_rows, run_pipeline, RunConfig, METRICS, SUMMARY};

fn tiny(out: &Path, budgets: &str) -> RunConfig {
    let text = format!(
        r#"
name = "tiny"
output = "{}"

[data.cifar_style]
classes = 3
subclasses_per_class = 2
train_per_subclass = 20
test_per_subclass = 10

[[expert]]
name = "H50"
kind = "synthetic"
strength_fraction = 0.5

[grid]
budgets = {budgets}
seeds = [0]
variants = ["embedding-fixmatch"]
algorithms = ["confidence-compare"]

[embedding]
epochs = 5

[embedding.backbone]
hidden = [16]
features = 8

[expertise.ssl]
epochs = 2
steps_per_epoch = 5

[defer]
epochs = 3
"#,
        out.display()
    );
    RunConfig::from_toml(&text).unwrap()
}

#[test]
fn unit_grid_gives_exactly_one_metric_row() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&tiny(dir.path(), "[2]")).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert_eq!(report.metrics.len(), 1);
    let row = &report.metrics[0];
    assert_eq!((row.m, row.l, row.seed), (2, 6, 0));
    assert_eq!(row.algorithm, "confidence-compare");
    assert!(row.relative_performance.is_some());
    let on_disk: Vec<MetricRecord> = read_rows(&dir.path().join(METRICS)).unwrap();
    assert_eq!(on_disk, report.metrics);
    assert!(dir.path().join(SUMMARY).exists());
    assert!(dir.path().join("config.toml").exists());
    assert!(dir.path().join("models/H50/seed0/m2/embedding-fixmatch/confidence-compare.predictions.csv").exists());
    let figures = emit_plots_from_dir(dir.path()).unwrap();
    assert_eq!(figures.len(), 1);
}

#[test]
fn rerun_is_reproducible_and_reuses_the_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_pipeline(&tiny(dir.path(), "[2]")).unwrap();
    assert_eq!(first.embeddings_trained, 1);
    let again = run_pipeline(&tiny(dir.path(), "[2]")).unwrap();
    assert_eq!(again.metrics, first.metrics);
    assert_eq!(again.expertise, first.expertise);
    assert_eq!(again.embeddings_trained, 0);

    // a new budget in the same output directory only adds rows
    let more = run_pipeline(&tiny(dir.path(), "[2, 3]")).unwrap();
    assert_eq!(more.embeddings_trained, 0);
    assert_eq!(more.metrics.len(), 2);
    assert_ne!(more.config_fp, first.config_fp);
    // same cell, different grid: only the fingerprint column changes
    let refit = MetricRecord {
        config_fp: first.config_fp.clone(),
        ..more.metrics[0].clone()
    };
    assert_eq!(refit, first.metrics[0]);
}

#[test]
fn a_failing_cell_does_not_stop_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    // 40 training rows per class, so m = 50 cannot be sampled
    let report = run_pipeline(&tiny(dir.path(), "[50, 2]")).unwrap();
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].m, Some(50));
    assert_eq!(report.metrics.len(), 1);
    assert_eq!(report.metrics[0].m, 2);
    let text = std::fs::read_to_string(dir.path().join("failures.csv")).unwrap();
    assert!(text.contains("50"));
}

#[test]
fn invalid_grid_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path(), "[2]");
    config.grid.seeds = vec![0, 0];
    assert!(run_pipeline(&config).is_err());
    assert!(!dir.path().join(METRICS).exists());
}
