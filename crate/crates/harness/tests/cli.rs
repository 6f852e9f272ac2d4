use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use markpaint_harness::table::Table;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_markpaint"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A tiny corpus and a one-epoch model shared by the tests.
fn fixture() -> &'static (tempfile::TempDir, PathBuf) {
    static FIXTURE: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        let model = dir.path().join("tiny.mpkt");
        let s = |p: &Path| p.to_str().unwrap().to_string();
        ok(&["make-corpus", "--count", "100", "--size", "32", "--seed", "3", "--out", &s(&corpus)]);
        ok(&[
            "train-toy", "--corpus", &s(&corpus), "--epochs", "1", "--crop-size", "32", "--base-channels", "4",
            "--depth", "2", "--out", &s(&model),
        ]);
        (dir, model)
    })
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let (fx, _) = fixture();
    let text = format!(
        r#"
corpus = "{corpus}"
max_images = 2
image_size = 32
models = ["toy:{model}"]
epsilons = [0.0, 0.1]
coverages = [0.1]
targets = ["red"]
defenses = ["jpeg:50", "brightness:0"]
output = "out"

[attack]
iterations = 5

[eot]
iterations = 5
n_masks = 3
eval_masks = 2
{extra}
"#,
        corpus = fx.path().join("corpus").display(),
        model = fixture().1.display(),
    );
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn grid_commands_write_their_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    for cmd in ["grid", "transfer", "eot-eval", "defend"] {
        ok(&[cmd, "--config", cfg]);
    }
    let out = dir.path().join("out");
    let rows = Table::read(&out.join("grid_rows.csv")).unwrap();
    // 2 images x 1 mask x 1 target x 2 budgets x 1 model x 3 references
    assert_eq!(rows.rows.len(), 12);
    assert_eq!(Table::read(&out.join("grid_aggregate.csv")).unwrap().rows.len(), 6);
    let matrix = Table::read(&out.join("transfer_matrix.csv")).unwrap();
    assert_eq!(matrix.header.len(), 3);
    assert_eq!(matrix.rows.len(), 2);
    // 2 images x 1 target x 2 budgets x 3 coverages x 2 held-out masks
    assert_eq!(Table::read(&out.join("eot_rows.csv")).unwrap().rows.len(), 24);
    // undefended plus two defenses per combination
    assert_eq!(Table::read(&out.join("defense_rows.csv")).unwrap().rows.len(), 12);
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("grid_run.json")).unwrap()).unwrap();
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);

    let plots = dir.path().join("plots");
    let listing = ok(&["plot", out.join("grid_aggregate.csv").to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert_eq!(String::from_utf8_lossy(&listing.stdout).lines().count(), 3);
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("elsewhere");
    ok(&[
        "grid", "--config", cfg.to_str().unwrap(), "--epsilon", "0.05", "--iterations", "2", "--step", "eps/10",
        "--alpha", "1", "--out", out.to_str().unwrap(), "--jobs", "1",
    ]);
    let agg = Table::read(&out.join("grid_aggregate.csv")).unwrap();
    assert!(agg.rows.iter().all(|r| r[0] == "0.05"));
}

#[test]
fn single_image_commands() {
    let (fx, model) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let image = fx.path().join("corpus").read_dir().unwrap().next().unwrap().unwrap().path();
    let image = image.to_str().unwrap();
    let model = model.to_str().unwrap();
    ok(&["make-mask", "--size", "32", "--coverage", "0.1", "--seed", "4", "--out", &p("mask.png")]);
    ok(&["make-target", "--color", "#00ff00", "--size", "32", "--out", &p("target.png")]);
    ok(&[
        "attack", "--image", image, "--mask", &p("mask.png"), "--target", &p("target.png"), "--models", model,
        "--epsilon", "0.1", "--iterations", "3", "--out", &p("attack"),
    ]);
    let trace = Table::read(&dir.path().join("attack/trace.csv")).unwrap();
    assert_eq!(trace.rows.len(), 4);
    assert_eq!(Table::read(&dir.path().join("attack/evaluation.csv")).unwrap().rows.len(), 3);
    ok(&[
        "evaluate", "--image", image, "--adv", &p("attack/adversarial.png"), "--mask", &p("mask.png"), "--target",
        "green", "--models", model, "--out", &p("eval.csv"),
    ]);
    ok(&[
        "attack-eot", "--image", image, "--target", "red", "--models", model, "--epsilon", "0.1", "--iterations",
        "3", "--n-masks", "2", "--out", &p("eot"),
    ]);
    assert!(dir.path().join("eot/adversarial.png").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(&["grid", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(bin(&["grid"]).status.code(), Some(1));
    let cfg = write_config(dir.path(), "[loss]\nalpha = -2.0\n");
    let out = bin(&["grid", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loss.alpha"));
    assert!(!dir.path().join("out").exists(), "validation failed but the run started");

    let missing = dir.path().join("missing.toml");
    assert_eq!(bin(&["grid", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
    let bad = bin(&["attack", "--image", "nope.png", "--mask", "nope.png", "--target", "red", "--out", "x"]);
    assert_eq!(bad.status.code(), Some(1));
}
