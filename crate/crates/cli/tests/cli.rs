use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn kvnorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvnorm"))
        .args(args)
        .env_remove("KVNORM_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = kvnorm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 16] = [
    "--steps", "8", "--layers", "1", "--heads", "2", "--d-model", "16", "--d-ff", "32", "--max-seq-len", "80",
    "--min-len", "24", "--max-len", "40",
];

/// One tiny trained checkpoint shared by the tests in this file.
fn model() -> &'static (TempDir, PathBuf) {
    static CELL: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let out = dir.path().join("train");
        let mut args = vec!["train", "--out", s(&out)];
        args.extend(TINY);
        ok(&args);
        let path = out.join("model.kvsq");
        (dir, path)
    })
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = kvnorm(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn training_writes_checkpoint_and_is_deterministic() {
    let (_, path) = model();
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[..4], b"KVSQ");

    let dir = TempDir::new().unwrap();
    let mut args = vec!["train", "--out", s(dir.path())];
    args.extend(TINY);
    ok(&args);
    assert_eq!(std::fs::read(dir.path().join("model.kvsq")).unwrap(), bytes);
    let losses = read(&dir.path().join("loss.csv"));
    assert_eq!(losses.lines().count(), 9);
    assert!(losses.starts_with("step,loss\n"));
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["train", "--out", s(dir.path()), "--lr", "1e30", "--grad-clip", "1e30"];
    args.extend(TINY);
    assert_eq!(kvnorm(&args).status.code(), Some(3));
}

#[test]
fn eval_validation_and_defaults() {
    let (_, m) = model();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("e");
    let conflict = kvnorm(&["eval", "--model", s(m), "--out", s(&out), "--policy", "none", "--ratio", "0.5"]);
    assert_eq!(conflict.status.code(), Some(2));
    let missing = kvnorm(&["eval", "--model", s(&dir.path().join("nope.kvsq")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
    let no_corpus = kvnorm(&["eval", "--model", s(m), "--out", s(&out), "--task", "lm"]);
    assert_eq!(no_corpus.status.code(), Some(2));

    ok(&["eval", "--model", s(m), "--out", s(&out), "--policy", "l2-low", "--ratio", "0.5", "--num-samples", "4", "--total-len", "40"]);
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["config"]["compression"]["skip_layers"], serde_json::json!([0, 1]));
    assert_eq!(manifest["config"]["compression"]["protect_recent"], 1);
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let again = dir.path().join("e2");
    ok(&["eval", "--model", s(m), "--out", s(&again), "--policy", "l2-low", "--ratio", "0.5", "--num-samples", "4", "--total-len", "40"]);
    assert_eq!(read(&out.join("result.csv")), read(&again.join("result.csv")));
}

#[test]
fn malformed_inputs_exit_cleanly() {
    let dir = TempDir::new().unwrap();
    let bad_model = dir.path().join("bad.kvsq");
    std::fs::write(&bad_model, b"KVSQ\x01garbage").unwrap();
    let out = s(dir.path());
    assert_eq!(kvnorm(&["eval", "--model", s(&bad_model), "--out", out]).status.code(), Some(2));

    let (_, m) = model();
    let bad_cfg = dir.path().join("cfg.json");
    std::fs::write(&bad_cfg, b"{ not json").unwrap();
    assert_eq!(kvnorm(&["eval", "--model", s(m), "--config", s(&bad_cfg), "--out", out]).status.code(), Some(2));

    let wrong = dir.path().join("wrong.json");
    std::fs::write(&wrong, br#"{"command":"sweep","config":{}}"#).unwrap();
    assert_eq!(kvnorm(&["eval", "--model", s(m), "--config", s(&wrong), "--out", out]).status.code(), Some(2));
}

#[test]
fn config_file_values_yield_to_flags() {
    let (_, m) = model();
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, br#"{"seed": 5, "data": {"num_samples": 3, "total_len": 40}}"#).unwrap();
    let out = dir.path().join("o");
    ok(&["eval", "--model", s(m), "--config", s(&cfg), "--out", s(&out), "--seed", "9"]);
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["config"]["seed"], 9);
    assert_eq!(manifest["config"]["data"]["num_samples"], 3);
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn sweep_grid_order_and_cross_check() {
    let (_, m) = model();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("s");
    let common = ["--model", s(m), "--num-samples", "4", "--total-len", "40", "--skip-layers", "none", "--seed", "2"];
    let mut args = vec!["sweep", "--out", s(&out), "--policies", "random,l2-high", "--ratios", "0.9,0.2,0.5", "--depths", "0.5"];
    args.extend(common);
    ok(&args);
    let rows = csv_rows(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 6);
    let keys: Vec<(String, String)> = rows.iter().map(|r| (r[1].clone(), r[2].clone())).collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.parse::<f64>().unwrap().total_cmp(&b.1.parse().unwrap())));
    assert_eq!(keys, sorted);
    assert_eq!(keys[0], ("l2-high".to_string(), "0.2".to_string()));

    for row in &rows {
        let e = dir.path().join(format!("e-{}-{}", row[1], row[2]));
        let mut args = vec!["eval", "--out", s(&e), "--policy", &row[1], "--ratio", &row[2], "--depths", "0.5"];
        args.extend(common);
        ok(&args);
        let single = csv_rows(&e.join("result.csv"));
        assert_eq!(single[0][5], row[5], "cell {row:?}");
    }

    let empty = kvnorm(&["sweep", "--model", s(m), "--out", s(&out), "--ratios", ""]);
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn skip_layer_sets_multiply_the_grid() {
    let (_, m) = model();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("s");
    ok(&[
        "sweep", "--model", s(m), "--out", s(&out), "--policies", "l2-low", "--ratios", "0.5", "--depths", "0,1",
        "--skip-layer-sets", "0;none", "--num-samples", "2", "--total-len", "40",
    ]);
    let rows = csv_rows(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().any(|r| r[4].is_empty()));
    assert!(rows.iter().any(|r| r[4] == "0"));
}

#[test]
fn analyze_shapes() {
    let (_, m) = model();
    let dir = TempDir::new().unwrap();
    let alr = dir.path().join("alr");
    ok(&["analyze", "--model", s(m), "--out", s(&alr), "--mode", "alr", "--chunk-len", "24", "--num-chunks", "2"]);
    let heat = csv_rows(&alr.join("alr_heatmap.csv"));
    assert_eq!(heat.len(), 2, "one row per head of the single layer");
    assert!(read(&alr.join("alr_heatmap.csv")).starts_with("layer,head,alr,num_chunks\n"));
    assert_eq!(csv_rows(&alr.join("alr_per_chunk.csv")).len(), 4);

    let dump = dir.path().join("dump");
    ok(&["analyze", "--model", s(m), "--out", s(&dump), "--mode", "dump", "--chunk-len", "30", "--num-chunks", "1"]);
    let rows = csv_rows(&dump.join("dump.csv"));
    for head in ["0", "1"] {
        assert_eq!(rows.iter().filter(|r| r[1] == head).count(), 30);
    }

    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, "the quick brown fox jumps over the lazy dog. ".repeat(4)).unwrap();
    let probe = dir.path().join("probe");
    ok(&[
        "analyze", "--model", s(m), "--out", s(&probe), "--mode", "probe", "--corpus", s(&corpus), "--chunk-len", "40",
        "--k-dims", "0",
    ]);
    let json: serde_json::Value = serde_json::from_str(&read(&probe.join("probe.json"))).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    for r in json.as_array().unwrap() {
        assert_eq!(r["attention_delta"], 0.0);
        assert_eq!(r["k_dims"], 0);
    }
}

#[test]
fn lm_eval_reports_perplexity() {
    let (_, m) = model();
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, "all work and no play makes a dull model. ".repeat(10)).unwrap();
    let out = dir.path().join("lm");
    ok(&["eval", "--model", s(m), "--out", s(&out), "--task", "lm", "--corpus", s(&corpus), "--chunk-len", "64"]);
    let rows = csv_rows(&out.join("result.csv"));
    let ppl: f64 = rows[0][6].parse().unwrap();
    assert!(ppl.is_finite() && ppl >= 1.0);
    assert_eq!(rows[0][8], "6");
}
