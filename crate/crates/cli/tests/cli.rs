use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use uterodiff::pipeline::{PipelineConfig, PipelineStage, StageStamp};

fn uterodiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uterodiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("UTERODIFF_DEVICE")
        .env_remove("UTERODIFF_CONFIG")
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn smoke_config(dir: &Path, root: &Path) -> String {
    let p = dir.join(format!("{}.json", root.file_name().unwrap().to_string_lossy()));
    fs::write(&p, serde_json::to_string_pretty(&PipelineConfig::smoke(root)).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn stamp(root: &Path, stage: PipelineStage) -> StageStamp {
    serde_json::from_slice(&fs::read(root.join("stamps").join(format!("{}.json", stage.name()))).unwrap()).unwrap()
}

#[test]
fn full_run_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for root in [&a, &b] {
        let cfg = smoke_config(dir.path(), root);
        let o = uterodiff(&["run", "--config", &cfg]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        assert!(text(&o.stdout).contains("report: done"));
    }
    for stage in PipelineStage::ALL {
        let (x, y) = (stamp(&a, stage), stamp(&b, stage));
        assert_eq!(x.seed, y.seed);
        assert_eq!(x.config_hash, y.config_hash);
        let det = |s: &StageStamp| s.artifacts.iter().filter(|a| a.deterministic).cloned().collect::<Vec<_>>();
        assert_eq!(det(&x), det(&y), "stage {}", stage.name());
    }
    let report = fs::read_to_string(a.join("reports/report.md")).unwrap();
    assert!(report.contains("Classification grid") && report.contains("Privacy filter"), "{report}");
    let csv = fs::read_to_string(a.join("reports/grid.csv")).unwrap();
    assert!(csv.starts_with("dataset,regime,seed,f1,auc,delta_f1,runtime_s,error"));

    let cfg = smoke_config(dir.path(), &a);
    let o = uterodiff(&["run", "--config", &cfg, "--resume"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(!text(&o.stdout).contains(": done"), "{}", text(&o.stdout));

    // A single stage verb reruns just that stage.
    let o = uterodiff(&["metrics", "--config", &cfg]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(text(&o.stdout).trim(), "metrics: done");

    // Standalone index building and filtering against the run's encoder.
    let enc = a.join("models/encoder_roi.ckpt");
    let idx = dir.path().join("roi.idx");
    let o = uterodiff(&[
        "build-index", "--encoder", enc.to_str().unwrap(),
        "--manifest", a.join("data/roi/manifest.jsonl").to_str().unwrap(),
        "--index", idx.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let report = dir.path().join("filter/report.json");
    let o = uterodiff(&[
        "privacy-filter", "--index", idx.to_str().unwrap(), "--encoder", enc.to_str().unwrap(),
        "--in", a.join("samples/ddpm_roi/manifest.jsonl").to_str().unwrap(),
        "--tau", "0.95", "--report", report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(report.exists() && dir.path().join("filter/manifest.jsonl").exists());
    // Filtering seeded real training images at tau 0.95 rejects them all.
    let o = uterodiff(&[
        "privacy-filter", "--index", idx.to_str().unwrap(), "--encoder", enc.to_str().unwrap(),
        "--in", a.join("data/roi/manifest.jsonl").to_str().unwrap(),
        "--report", dir.path().join("self/report.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("rejected 16/16"), "{}", text(&o.stdout));

    // Standalone sampling from a trained checkpoint.
    let out = dir.path().join("standalone");
    let o = uterodiff(&[
        "sample", "--checkpoint", a.join("models/ddpm_roi.ckpt").to_str().unwrap(),
        "--per-class", "1", "--into", out.to_str().unwrap(), "--seed", "3",
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("manifest.jsonl")).unwrap().lines().count(), 4);
    let o = uterodiff(&[
        "sample", "--checkpoint", a.join("models/ldm_roi.ckpt").to_str().unwrap(),
        "--into", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("--autoencoder"));
}

#[test]
fn effective_config_merges_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, r#"{"ddpm_train": {"max_epochs": 7}}"#).unwrap();
    let o = uterodiff(&["run", "--config", p.to_str().unwrap(), "--seed", "11", "--print-effective-config"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["ddpm_train"]["max_epochs"], 7);
    assert_eq!(v["master_seed"], 11);
    assert_eq!(v["privacy"]["tau"], 0.95);
}

#[test]
fn config_errors_exit_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, r#"{"ddpm_train": {"max_epoch": 7}}"#).unwrap();
    let o = uterodiff(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("ddpm_train.max_epoch"), "{}", text(&o.stderr));

    let out = dir.path().join("out");
    let mut cfg = PipelineConfig::smoke(&out);
    cfg.input_manifest = Some(dir.path().join("absent.jsonl"));
    fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = uterodiff(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("absent.jsonl"));
    assert!(!out.exists(), "no work before input checks");

    let o = uterodiff(&["run", "--stages", "sampling", "--print-effective-config"]);
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_uterodiff"))
        .args(["run", "--print-effective-config"])
        .env("UTERODIFF_DEVICE", "cuda")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("cpu only"));
}

#[test]
fn stage_verb_reports_missing_upstream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), &dir.path().join("empty"));
    let o = uterodiff(&["train-ddpm", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("run preprocess first"), "{}", text(&o.stderr));
    assert!(dir.path().join("empty/failures/train_ddpm.json").exists());
}
