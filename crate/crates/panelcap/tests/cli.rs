use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn panelcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panelcap"))
        .args(args)
        .env_remove("PANELCAP_CACHE")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "\
patch = 16
dim = 16
heads = 2
caption-layers = 1
det-layers = 1
queries = 10
steps = 2
batch-size = 2
max-new-tokens-rl = 16
lora-r = 8
";

fn synth(dir: &Path) {
    let o = panelcap(&["synth", "--out", s(dir), "--train", "6", "--val", "2", "--test", "3", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_writes_splits_and_stats() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let stats: Value = serde_json::from_slice(&fs::read(tmp.path().join("stats.json")).unwrap()).unwrap();
    let figures: Vec<u64> = stats["splits"].as_array().unwrap().iter().map(|r| r["figures"].as_u64().unwrap()).collect();
    assert_eq!(figures, [6, 2, 3]);
    let test = fs::read_to_string(tmp.path().join("test.jsonl")).unwrap();
    assert_eq!(test.lines().count(), 3);
    let rec: Value = serde_json::from_str(test.lines().next().unwrap()).unwrap();
    assert_eq!(rec["v"], 1);
    assert!(tmp.path().join(rec["image"].as_str().unwrap()).exists());
}

#[test]
fn later_stage_without_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let run = tmp.path().join("run");
    let o = panelcap(&["train", "--stage", "2", "--data", s(&tmp.path().join("train.jsonl")), "--run-dir", s(&run)]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage1.ckpt") && err.contains("--stage 1"), "{err}");
}

#[test]
fn train_infer_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");
    let train = tmp.path().join("train.jsonl");
    for stage in ["1", "2", "3", "4"] {
        let o = panelcap(&["train", "--stage", stage, "--data", s(&train), "--run-dir", s(&run), "--config", s(&cfg), "--lambda-rl", "0.5"]);
        // The adapter key only warns.
        assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).contains("lora-r"));
        assert!(run.join(format!("stage{stage}.ckpt")).exists());
    }
    let manifest: Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stages"].as_object().unwrap().len(), 4);
    assert_eq!(manifest["stages"]["4"]["config"]["lambda-rl"], 0.5);
    assert_eq!(manifest["stages"]["1"]["config_hash"].as_str().unwrap().len(), 64);
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 8);

    let test = tmp.path().join("test.jsonl");
    let pred = tmp.path().join("pred.jsonl");
    let o = panelcap(&["infer", "--checkpoint", s(&run.join("stage4.ckpt")), "--data", s(&test), "--out", s(&pred)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&pred).unwrap().lines().count(), 3);

    let o = panelcap(&["eval-det", "--gt", s(&test), "--pred", s(&pred)]);
    assert_eq!(code(&o), 0);
    let det: Value = serde_json::from_slice(&o.stdout).unwrap();
    let m = det["mAP@0.5:0.95"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&m));
    assert_eq!(det["per_threshold"].as_array().unwrap().len(), 10);

    let out = tmp.path().join("cap.csv");
    let o = panelcap(&["eval-cap", "--gt", s(&test), "--pred", s(&pred), "--format", "csv", "--out", s(&out)]);
    assert!(code(&o) == 0 || code(&o) == 2);
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("metric,value\nbleu4,"));
}

/// Predictions copied from the ground truth, with one figure missing and one
/// broken line.
#[test]
fn caption_eval_scores_missing_figures_as_zero() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let test = tmp.path().join("test.jsonl");
    let text = fs::read_to_string(&test).unwrap();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let rec: Value = serde_json::from_str(line).unwrap();
        if i == 0 {
            continue;
        }
        let raw: String = rec["panels"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| format!("{}: {}\n", p["label"].as_str().unwrap(), p["caption"].as_str().unwrap()))
            .collect();
        lines.push(serde_json::json!({"figure_id": rec["figure_id"], "raw_output": format!("{raw}[DET]")}).to_string());
    }
    lines.push("{not json".into());
    let pred = tmp.path().join("pred.jsonl");
    fs::write(&pred, lines.join("\n")).unwrap();

    let o = panelcap(&["eval-cap", "--gt", s(&test), "--pred", s(&pred)]);
    assert_eq!(code(&o), 2);
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["missing_predictions"], 1);
    assert_eq!(r["skipped_records"], 1);
    let per: Vec<f64> = r["per_figure"].as_array().unwrap().iter().map(|f| f["bleu4"].as_f64().unwrap()).collect();
    assert_eq!(per, [0.0, 100.0, 100.0]);
    let bleu = r["dataset"]["bleu4"].as_f64().unwrap();
    assert!((bleu - 200.0 / 3.0).abs() < 1e-9);
    assert!((r["parse_rate"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn unknown_config_key_fails() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"lamda-det": 1.0}"#).unwrap();
    let o = panelcap(&[
        "train",
        "--stage",
        "1",
        "--data",
        s(&tmp.path().join("train.jsonl")),
        "--run-dir",
        s(&tmp.path().join("run")),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(code(&o), 1);
}
