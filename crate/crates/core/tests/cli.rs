mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use drfuse::cli::{cmd_evaluate, cmd_generate, cmd_train, ExperimentConfig, SNAPSHOT_FILE};
use drfuse::data::{DatasetManifest, SyntheticConfig};
use drfuse::eval::MetricReport;
use drfuse::{Error, ModelConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drfuse"))
}

fn write_config(path: &Path, cfg: &ExperimentConfig) {
    fs::write(path, cfg.to_toml().unwrap()).unwrap();
}

#[test]
fn generate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::smoke_experiment(1);
    let a = cmd_generate(&cfg, &dir.path().join("a")).unwrap();
    let b = cmd_generate(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(fs::read(&a.records).unwrap(), fs::read(&b.records).unwrap());
    assert_eq!(
        fs::read(&a.manifest).unwrap(),
        fs::read(&b.manifest).unwrap()
    );
    assert!(dir.path().join("a/generation.json").exists());
    assert!(dir.path().join("a").join(SNAPSHOT_FILE).exists());
}

#[test]
fn mimic_like_preset_scale_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.synthetic = Some(SyntheticConfig {
        n_samples: 50,
        ..SyntheticConfig::mimic_like()
    });
    let out = cmd_generate(&cfg, dir.path()).unwrap();
    let m = DatasetManifest::read(&out.manifest).unwrap();
    assert_eq!((m.n_classes, m.n_features, m.seq_len), (25, 17, Some(48)));

    let status = bin()
        .args(["generate", "--preset", "mimic-like", "--out"])
        .arg(dir.path().join("cli"))
        .output()
        .unwrap();
    assert!(status.status.success());
    let m = DatasetManifest::read(&dir.path().join("cli/manifest.json")).unwrap();
    assert_eq!((m.n_classes, m.n_features, m.seq_len), (25, 17, Some(48)));
}

#[test]
fn invalid_missing_rate_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    fs::write(&cfg_path, "[dataset.synthetic]\nmissing_rate = 1.5\n").unwrap();
    let out = dir.path().join("out");
    let res = bin()
        .args(["generate", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("missing_rate"), "{stderr}");
    assert!(!out.exists());
}

#[test]
fn missing_manifest_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    fs::write(
        &cfg_path,
        "[dataset]\nmanifest = \"nowhere/manifest.json\"\n",
    )
    .unwrap();
    let res = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("nowhere/manifest.json"), "{stderr}");
}

#[test]
fn smoke_training_is_fast_and_snapshot_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::smoke_experiment(3);
    cfg.model = ModelConfig::default();
    let start = Instant::now();
    let first = cmd_train(&cfg, &dir.path().join("first")).unwrap();
    assert!(
        start.elapsed().as_secs() < 60,
        "smoke run took {:?}",
        start.elapsed()
    );
    let log = fs::read_to_string(dir.path().join("first/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let snapshot = ExperimentConfig::load(&dir.path().join("first").join(SNAPSHOT_FILE)).unwrap();
    assert_eq!(snapshot, cfg);
    let second = cmd_train(&snapshot, &dir.path().join("second")).unwrap();
    assert_eq!(fs::read(first).unwrap(), fs::read(second).unwrap());
}

#[test]
fn matched_and_full_evaluations_give_distinct_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::smoke_experiment(2);
    let ckpt = cmd_train(&cfg, dir.path()).unwrap();
    let full = cmd_evaluate(&cfg, &ckpt, dir.path(), false).unwrap();
    let matched = cmd_evaluate(&cfg, &ckpt, dir.path(), true).unwrap();
    assert_eq!(full.report.label, "full");
    assert_eq!(matched.report.label, "matched");
    assert!(matched.report.n_samples < full.report.n_samples);
    assert_eq!(matched.report.n_paired, matched.report.n_samples);
    assert_ne!(full.summary, matched.summary);

    let summary: MetricReport =
        serde_json::from_str(&fs::read_to_string(&full.summary).unwrap()).unwrap();
    assert_eq!(summary, full.report);
    let csv = fs::read_to_string(&full.csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + cfg.model.n_classes + 1);
    assert!(full.report.probe.is_some());

    let mut rdr = csv::Reader::from_path(full.alpha.unwrap()).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (has_cxr, a0, a1, a2) = (
        col("has_cxr"),
        col("distinct_ehr"),
        col("shared"),
        col("distinct_cxr"),
    );
    let mut absent = 0;
    for row in rdr.records() {
        let row = row.unwrap();
        let alpha: Vec<f64> = [a0, a1, a2]
            .iter()
            .map(|&i| row[i].parse().unwrap())
            .collect();
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        if &row[has_cxr] == "false" {
            absent += 1;
            assert_eq!(alpha[2], 0.0);
        }
    }
    assert!(absent > 0);
}

#[test]
fn evaluation_is_reproducible_and_checks_class_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::smoke_experiment(1);
    let ckpt = cmd_train(&cfg, dir.path()).unwrap();
    let a = cmd_evaluate(&cfg, &ckpt, &dir.path().join("a"), false).unwrap();
    let b = cmd_evaluate(&cfg, &ckpt, &dir.path().join("b"), false).unwrap();
    assert_eq!(fs::read(&a.csv).unwrap(), fs::read(&b.csv).unwrap());
    assert_eq!(fs::read(&a.summary).unwrap(), fs::read(&b.summary).unwrap());

    let mut other = cfg.clone();
    other.dataset.synthetic.as_mut().unwrap().n_classes = 5;
    other.model.n_classes = 5;
    let err = cmd_evaluate(&other, &ckpt, &dir.path().join("c"), false).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)), "{err}");
}

#[test]
fn binary_runs_generate_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let status = bin()
        .args(["generate", "--preset", "smoke", "--seed", "3", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    assert!(status.status.success());

    let mut cfg = common::smoke_experiment(2);
    cfg.dataset.synthetic = None;
    cfg.dataset.manifest = Some("data/manifest.json".into());
    let cfg_path = dir.path().join("exp.toml");
    write_config(&cfg_path, &cfg);

    let run = dir.path().join("run");
    let train = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(
        train.status.success(),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    let eval = bin()
        .args(["evaluate", "--matched-only", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    assert!(String::from_utf8_lossy(&eval.stdout).contains("matched: macro PRAUC"));
    for file in [
        "checkpoint.safetensors",
        "train_log.jsonl",
        "report_matched.csv",
        "alpha_matched.csv",
    ] {
        assert!(run.join(file).exists(), "{file} missing");
    }
}
