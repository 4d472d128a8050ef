use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_motion-intent"));
    c.env_remove("MOTION_INTENT_CONFIG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{"steps": 2, "seed": 0, "model": {"d_model": 8, "kernel_sizes": [1, 3], "encoder_layers": 1,
  "encoder_heads": 2, "knn_k": 4, "dropout": 0.0, "decoder_layers": 2, "decoder_heads": 2, "decoder_hidden": 8,
  "head_hidden": 8, "num_modes": 6, "top_m": 24, "top_n": 192, "future_steps": 8, "output_scale": 1.0}}"#;

#[test]
fn gradcheck_table_within_tolerance() {
    let out = ok(&["gradcheck", "--seed", "7"]);
    let rows: Vec<&str> = out.lines().skip(1).filter(|l| l.ends_with("ok") || l.ends_with("FAIL")).collect();
    assert!(rows.len() >= 30, "{out}");
    for r in rows {
        let err: f64 = r.split_whitespace().nth(3).unwrap().parse().unwrap();
        assert!(err <= 1e-4, "{r}");
    }
}

#[test]
fn gen_then_label_writes_labels_and_stats() {
    let d = tempfile::tempdir().unwrap();
    let (corpus, labels) = (d.path().join("c"), d.path().join("l"));
    ok(&["gen", "--seed", "1", "--count", "20", "--out", p(&corpus)]);
    let stats = ok(&["label", "--corpus", p(&corpus), "--out", p(&labels)]);
    let files = std::fs::read_dir(&labels).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("labels_")).count();
    assert_eq!(files, 20);
    let counts: Vec<(String, usize)> = stats
        .lines()
        .skip(1)
        .take(4)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap())
        })
        .collect();
    let max = counts.iter().max_by_key(|c| c.1).unwrap();
    assert_eq!(max.0, "ignored");
    assert_eq!(std::fs::read_to_string(labels.join("label_stats.csv")).unwrap(), stats);
}

#[test]
fn untrained_checkpoint_predicts_k_modes() {
    let d = tempfile::tempdir().unwrap();
    let (corpus, run_dir, preds) = (d.path().join("c"), d.path().join("r"), d.path().join("p"));
    let cfg = d.path().join("cfg.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    ok(&["gen", "--seed", "2", "--count", "3", "--future-steps", "8", "--out", p(&corpus)]);
    ok(&["train", "--corpus", p(&corpus), "--out", p(&run_dir), "--config", p(&cfg), "--steps", "0"]);
    assert!(run_dir.join("checkpoint.json").exists());
    ok(&["predict", "--run", p(&run_dir), "--corpus", p(&corpus), "--out", p(&preds)]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(preds.join("prediction_00000.json")).unwrap()).unwrap();
    let traj = json["trajectories"].as_array().unwrap();
    assert_eq!(traj.len(), 6);
    assert_eq!(traj[0].as_array().unwrap().len(), 8);
    assert_eq!(json["scores"].as_array().unwrap().len(), 6);
}

#[test]
fn train_eval_and_ensemble_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let j = |s: &str| d.path().join(s);
    std::fs::write(j("cfg.json"), TINY_CONFIG).unwrap();
    ok(&["gen", "--seed", "3", "--count", "4", "--future-steps", "8", "--out", p(&j("c"))]);
    // The config path comes from the environment here.
    let o = bin()
        .env("MOTION_INTENT_CONFIG", j("cfg.json"))
        .args(["train", "--corpus", p(&j("c")), "--out", p(&j("r"))])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let loss = std::fs::read_to_string(j("r").join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    ok(&["predict", "--run", p(&j("r")), "--corpus", p(&j("c")), "--out", p(&j("p"))]);
    ok(&["predict", "--run", p(&j("r")), "--corpus", p(&j("c")), "--out", p(&j("q")), "--no-pruning"]);
    ok(&["eval", "--corpus", p(&j("c")), "--predictions", p(&j("p")), "--out", p(&j("rep.json")), "--csv", p(&j("rep.csv"))]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(j("rep.json")).unwrap()).unwrap();
    assert_eq!(report["scenarios"], 4);
    let mr = report["miss_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mr));
    assert!(std::fs::read_to_string(j("rep.csv")).unwrap().starts_with("metric,value\n"));
    ok(&["ensemble", "--predictions", p(&j("p")), p(&j("q")), "--out", p(&j("e"))]);
    let e: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(j("e").join("ensemble_00000.json")).unwrap()).unwrap();
    assert_eq!(e["trajectories"].as_array().unwrap().len(), 6);
    let total: f64 = e["scores"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn unknown_flag_fails_with_message() {
    let o = run(&["gen", "--bogus"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--bogus"));
}

#[test]
fn missing_corpus_fails_with_message() {
    let o = run(&["label", "--corpus", "/definitely/not/here"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("/definitely/not/here"), "{err}");
    assert!(o.stdout.is_empty());
}

#[test]
fn horizon_mismatch_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let corpus = d.path().join("c");
    ok(&["gen", "--count", "1", "--future-steps", "5", "--out", p(&corpus)]);
    let cfg = d.path().join("cfg.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let o = run(&["train", "--corpus", p(&corpus), "--config", p(&cfg), "--out", p(&d.path().join("r"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon"));
}
