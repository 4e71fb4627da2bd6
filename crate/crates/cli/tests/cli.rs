//! Drives the installed binary end to end: exit codes, artifact layout, and
//! config echo reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn saliq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saliq"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn saliq")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_flag_prints_usage_and_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = saliq(&["--definitely-not-a-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn unknown_subcommand_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = saliq(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn help_exits_with_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = saliq(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("gen-data"), "{}", stdout(&out));
}

#[test]
fn invalid_distribution_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = saliq(&["theory", "--dist", "cauchy", "--out", "t"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("error:"), "{}", stderr(&out));
}

#[test]
fn theory_writes_report_csv_with_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let out = saliq(
        &[
            "theory", "--dist", "uniform", "--trials", "20000", "--out", "t",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("pass"), "{}", stdout(&out));

    let csv = std::fs::read_to_string(dir.path().join("t/theory.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.contains("bound_pass"));
    assert!(header.contains("pointwise_violation_rate"));
    let row = lines.next().unwrap();
    assert!(row.starts_with("uniform,"));
    assert!(row.ends_with("true"));
    assert!(dir.path().join("t/config.resolved.json").exists());
}

#[test]
fn rerunning_with_the_echoed_config_reproduces_the_report_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let first = saliq(
        &[
            "theory", "--dist", "laplace", "--trials", "15000", "--seed", "8", "--out", "a",
        ],
        dir.path(),
    );
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let second = saliq(
        &["theory", "--config", "a/config.resolved.json", "--out", "b"],
        dir.path(),
    );
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    let a = std::fs::read(dir.path().join("a/theory.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/theory.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradcheck_prints_max_relative_error_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = saliq(
        &[
            "gradcheck",
            "--set",
            "model.embed_dim=16",
            "--set",
            "model.num_layers=2",
            "--set",
            "model.num_heads=2",
            "--set",
            "model.image_size=16",
            "--set",
            "model.mlp_head_dims=[8,1]",
            "--set",
            "crop_size=16",
            "--set",
            "samples=60",
            "--out",
            "gc",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(
        stdout(&out).contains("max relative error"),
        "{}",
        stdout(&out)
    );
    let report = std::fs::read_to_string(dir.path().join("gc/gradcheck.json")).unwrap();
    assert!(report.contains("max_rel_err"));
}

#[test]
fn pipeline_from_dataset_to_eval_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let gen = saliq(
        &[
            "gen-data",
            "--set",
            "pristine_count=6",
            "--seed",
            "9",
            "--out",
            "data",
        ],
        dir.path(),
    );
    assert_eq!(gen.status.code(), Some(0), "{}", stderr(&gen));
    assert!(dir.path().join("data/manifest.csv").exists());

    let train = saliq(
        &[
            "train",
            "--set",
            "paths.data_dir=data",
            "--set",
            "schedule.epochs=0",
            "--set",
            "seeds=[1]",
            "--set",
            "spread_images=4",
            "--out",
            "runs",
        ],
        dir.path(),
    );
    assert_eq!(train.status.code(), Some(0), "{}", stderr(&train));
    let ckpt = dir.path().join("runs/seed_1/final.ckpt");
    assert!(ckpt.exists());
    assert!(dir.path().join("runs/config.resolved.json").exists());
    assert!(dir.path().join("runs/report.json").exists());

    let eval = saliq(
        &[
            "eval",
            "--checkpoint",
            "runs/seed_1/final.ckpt",
            "--data",
            "data",
            "--split",
            "test",
            "--seed",
            "1",
            "--out",
            "evaled",
        ],
        dir.path(),
    );
    assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
    assert!(stdout(&eval).contains("srcc"), "{}", stdout(&eval));
    let eval_json = std::fs::read_to_string(dir.path().join("evaled/eval.json")).unwrap();
    assert!(eval_json.contains("\"srcc\""));
    assert!(eval_json.contains("\"n\": 10"), "{eval_json}");

    let export = saliq(
        &[
            "export-embeddings",
            "--checkpoint",
            "runs/seed_1/final.ckpt",
            "--data",
            "data",
            "--split",
            "test",
            "--seed",
            "1",
            "--out",
            "emb",
        ],
        dir.path(),
    );
    assert_eq!(export.status.code(), Some(0), "{}", stderr(&export));
    let csv = std::fs::read_to_string(dir.path().join("emb/embeddings.csv")).unwrap();
    let rows = csv.lines().count();
    assert_eq!(rows, 1 + 10 * 5, "embeddings rows: {rows}");

    let saliency = saliq(
        &[
            "saliency",
            "--image",
            "data/images/img000_blur3.pgm",
            "--checkpoint",
            "runs/seed_1/final.ckpt",
            "--heatmap",
            "--out",
            "sal",
        ],
        dir.path(),
    );
    assert_eq!(saliency.status.code(), Some(0), "{}", stderr(&saliency));
    assert!(
        stdout(&saliency).contains("window m="),
        "{}",
        stdout(&saliency)
    );
    assert!(dir.path().join("sal/grid.csv").exists());
    assert!(dir.path().join("sal/heatmap.pgm").exists());
    let window = std::fs::read_to_string(dir.path().join("sal/window.json")).unwrap();
    assert!(window.contains("\"rect\""));
}
