use serde_json::Value;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn simon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simon")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = simon(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, streams: &str) {
    ok(&["synth", "--out", p(dir), "--streams", streams, "--len", "30", "--d-in", "8", "--seed", "3"]);
}

fn features(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "simf"))
        .map(|p| p.to_str().unwrap().to_owned())
        .collect();
    v.sort();
    v
}

const TINY: [&str; 8] = ["--d-model", "16", "--heads", "4", "--epochs", "2", "--batch-size", "2"];

#[test]
fn train_then_infer_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "4");
    let model = tmp.path().join("m.simw");
    let log = tmp.path().join("log.csv");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&model), "--log", p(&log)];
    args.extend(TINY);
    ok(&args);
    let csv = fs::read_to_string(&log).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,step,lr,loss"));
    assert_eq!(lines.count(), 4);

    let feats = features(&data);
    let run = |name: &str, jobs: &str| {
        let out = tmp.path().join(name);
        let mut a = vec!["infer", "--model", p(&model), "--out", p(&out), "--jobs", jobs, "--features"];
        a.extend(feats.iter().map(String::as_str));
        ok(&a);
        fs::read(&out).unwrap()
    };
    let first = run("a.jsonl", "1");
    assert_eq!(first, run("b.jsonl", "1"));
    assert_eq!(first, run("c.jsonl", "3"));
    assert!(tmp.path().join("a.jsonl.meta.json").exists());

    // streaming knobs may change at inference time
    let out = tmp.path().join("k7.jsonl");
    let mut a = vec!["infer", "--model", p(&model), "--out", p(&out), "--k", "7", "--threshold", "0.3", "--features"];
    a.push(&feats[0]);
    ok(&a);
    // architecture may not
    let mut a = vec!["infer", "--model", p(&model), "--out", p(&out), "--d-model", "32", "--features"];
    a.push(&feats[0]);
    assert!(!simon(&a).status.success());
}

#[test]
fn ground_truth_as_predictions_scores_full_marks() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "3");
    let preds = tmp.path().join("gt.jsonl");
    let mut lines = String::new();
    let mut anns: Vec<_> = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    anns.sort();
    for ann in &anns {
        let v: Value = serde_json::from_str(&ok(&["gt-convert", "--annotation", p(ann)])).unwrap();
        for inst in v["instances"].as_array().unwrap() {
            let mut rec = inst.clone();
            rec["video_id"] = v["video_id"].clone();
            lines.push_str(&rec.to_string());
            lines.push('\n');
        }
    }
    fs::write(&preds, lines).unwrap();
    fs::write(tmp.path().join("gt.jsonl.meta.json"), r#"{"fps": 30.0, "l": 6}"#).unwrap();

    let tal: Value = serde_json::from_str(&ok(&["eval-tal", "--predictions", p(&preds), "--annotations", p(&data)])).unwrap();
    assert!((tal["tal"]["average"].as_f64().unwrap() - 100.0).abs() < 1e-9, "{tal}");

    let secs: Value = serde_json::from_str(&ok(&[
        "eval-tal", "--predictions", p(&preds), "--annotations", p(&data), "--unit", "seconds",
    ]))
    .unwrap();
    assert!((secs["tal"]["average"].as_f64().unwrap() - 100.0).abs() < 1e-9, "{secs}");

    let odas: Value = serde_json::from_str(&ok(&["eval-odas", "--predictions", p(&preds), "--annotations", p(&data)])).unwrap();
    let first = odas["odas"]["p_map"][0].as_f64().unwrap();
    assert!((first - 100.0).abs() < 1e-9, "{odas}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = simon(&["infer", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(out.stdout.is_empty());
}

#[test]
fn bad_config_value_is_a_usage_error() {
    let out = simon(&["bench", "--k", "0", "--t", "10", "--runs", "1", "--warmup", "0"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn truncated_features_report_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1");
    let feats = features(&data);
    let bytes = fs::read(&feats[0]).unwrap();
    fs::write(&feats[0], &bytes[..bytes.len() - 5]).unwrap();
    let out = simon(&["--json-errors", "resample", "--input", &feats[0], "--out", p(&tmp.path().join("r.simf"))]);
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "format");
    assert_eq!(err["exit_code"], 3);
    assert!(err["message"].as_str().unwrap().contains("expected"));
}

#[test]
fn resample_fixes_length() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1");
    let out = tmp.path().join("r.simf");
    ok(&["resample", "--input", &features(&data)[0], "--out", p(&out), "--len", "100"]);
    let (d_in, rows) = simon_core::io::read_features(&out).unwrap();
    assert_eq!((d_in, rows.len()), (8, 100));
}

#[test]
fn bench_reports_constant_state() {
    let out = ok(&[
        "bench", "--d-model", "16", "--heads", "4", "--d-in", "8", "--classes", "3", "--k", "4", "--t", "1000", "--runs",
        "2", "--warmup", "10",
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    for key in ["mean_ms", "p50_ms", "p99_ms", "cv"] {
        assert!(v[key].as_f64().unwrap().is_finite(), "{key}");
    }
    let sizes: Vec<(u64, u64)> = v["state_bytes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e[0].as_u64().unwrap(), e[1].as_u64().unwrap()))
        .collect();
    let steady: Vec<u64> = sizes.iter().filter(|(t, _)| *t > 4).map(|s| s.1).collect();
    assert!(steady.len() >= 3);
    assert!(steady.iter().all(|&b| b == steady[0]), "{sizes:?}");
}
