use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const HYPER: &str = r#"
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
"#;

fn l2d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l2d")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = l2d(args);
    assert!(
        out.status.success(),
        "l2d {args:?} failed\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn stages_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("hyper.toml");
    fs::write(&cfg, HYPER).unwrap();
    let cfg = p(&cfg);
    let data = d.join("data.csv");
    ok(&[
        "prepare-data", "--kind", "cifar-style", "--out", p(&data),
        "--set", "classes=3", "--set", "subclasses_per_class=2",
        "--set", "train_per_subclass=20", "--set", "test_per_subclass=10",
    ]);
    let emb = d.join("emb.json");
    ok(&["train-embedding", "--manifest", p(&data), "--out", p(&emb), "--config", cfg]);
    let with_h = d.join("with_h.csv");
    let expert = d.join("expert.json");
    ok(&[
        "gen-expert", "--manifest", p(&data), "--embedding", p(&emb),
        "--strength-fraction", "0.5", "--expert-out", p(&expert), "--out", p(&with_h),
    ]);
    let ex = d.join("expertise.json");
    let split = d.join("split.json");
    let stdout = ok(&[
        "train-expertise", "--manifest", p(&with_h), "--embedding", p(&emb),
        "--variant", "embedding-fixmatch", "--m", "2", "--out", p(&ex),
        "--split-out", p(&split), "--config", cfg,
    ]);
    assert!(stdout.contains("F0.5"), "{stdout}");
    let completed = d.join("completed.csv");
    ok(&[
        "gen-labels", "--manifest", p(&with_h), "--split", p(&split),
        "--expertise", p(&ex), "--out", p(&completed),
    ]);
    let team = d.join("team.json");
    ok(&[
        "train-defer", "--manifest", p(&completed), "--embedding", p(&emb),
        "--algorithm", "confidence-compare", "--out", p(&team), "--config", cfg,
    ]);
    let preds = d.join("preds.csv");
    ok(&[
        "evaluate", "--manifest", p(&with_h), "--team", p(&team),
        "--expertise", p(&ex), "--predictions", p(&preds),
    ]);
    let lines = fs::read_to_string(&preds).unwrap().lines().count();
    assert_eq!(lines, 1 + 3 * 2 * 10);
    for force in ["never", "always"] {
        ok(&["evaluate", "--manifest", p(&with_h), "--team", p(&team), "--force", force]);
    }
}

fn run_all_config(dir: &Path, budgets: &str) -> std::path::PathBuf {
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
{HYPER}"#,
        dir.join("run").display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_all_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_all_config(dir.path(), "[2]");
    assert_eq!(l2d(&["run-all", "--config", p(&cfg)]).status.code(), Some(0));
    ok(&["plot", "--run", p(&dir.path().join("run"))]);

    let dir = tempfile::tempdir().unwrap();
    let cfg = run_all_config(dir.path(), "[2, 50]");
    let out = l2d(&["run-all", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed cells"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = 3\n").unwrap();
    assert_eq!(l2d(&["run-all", "--config", p(&bad)]).status.code(), Some(1));
}
