use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "seed": 3,
  "clients": 2,
  "exemplars": 3,
  "encoder": {"num_layers": 1, "hidden_dim": 4, "embed_dim": 4},
  "train": {"batch_size": 8, "local_epochs": 1, "epochs": 2},
  "fedcc": {"steps": 10},
  "data": {
    "source": {"kind": "synthetic", "modes": 2, "channels": 2, "seg_len": 8, "n_per_mode": 12,
               "n_eval_per_mode": 8, "noise_sigma": 0.05, "eval_anomaly_fraction": 0.2},
    "partition": {"scheme": "by_mode", "assignment": {"kind": "disjoint", "modes_per_client": 1}}
  }
}"#;

fn fedexdnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedexdnn"))
        .args(args)
        .env("FEDEXDNN_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn fed_defaults_to_five_rounds_and_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("out");
    let o = fedexdnn(&["fed", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for r in 1..=5 {
        let report = read_json(&out.join(format!("round_{r:03}.json")));
        assert_eq!(report["report"]["round"], r);
        assert_eq!(report["config"]["rounds"], 5);
        assert_eq!(report["config"]["seed"], 3);
        assert_eq!(report["report"]["config_hash"].as_str().unwrap().len(), 64);
        let auc = report["report"]["metrics"]["auc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
    assert!(!out.join("round_006.json").exists());
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("round,aggregator,auc,f1,precision,recall,threshold,seconds\n"));
    assert_eq!(summary.lines().count(), 6);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["aggregator"], "fedcc");
    assert!(out.join("model.json").exists());
}

#[test]
fn aggregator_sweep_writes_one_directory_each() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("\"seed\": 3", "\"seed\": 3, \"rounds\": 1"));
    let out = tmp.path().join("sweep");
    let o = fedexdnn(&[
        "fed", "--config", &cfg, "--out", out.to_str().unwrap(), "--aggregator", "all", "--parallel-clients", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["fedcc", "fedavg_ex", "kmeans_ex"] {
        assert!(out.join(name).join("round_001.json").exists(), "{name}");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("run,round,aggregator"));
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn unknown_aggregator_lists_the_valid_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let o = fedexdnn(&["fed", "--config", &cfg, "--aggregator", "fedprox"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("fedprox") && e.contains("fedcc") && e.contains("fedavg_ex") && e.contains("kmeans_ex"), "{e}");
}

#[test]
fn missing_dataset_is_a_config_error_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"eval": {"threshold": "auc-only"},
            "data": {"source": {"kind": "csv", "train": "nope.csv", "test": "nope.csv", "label_column": "label", "seg_len": 4}}}"#,
    );
    let o = fedexdnn(&["local", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.source.train"), "{}", stderr(&o));

    let o = fedexdnn(&["local", "--config", tmp.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn csv_local_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut train = String::from("a,b,label\n");
    let mut test = String::from("a,b,label\n");
    for t in 0..120 {
        let x = (t as f64 * 0.5).sin();
        train += &format!("{x},{},0\n", x * 0.5);
        let spike = (60..64).contains(&t);
        let y = if spike { 4.0 } else { x };
        test += &format!("{y},{},{}\n", x * 0.5, u8::from(spike));
    }
    std::fs::write(tmp.path().join("train.csv"), train).unwrap();
    std::fs::write(tmp.path().join("test.csv"), test).unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"exemplars": 2, "eval": {"threshold": "test-oracle"},
            "encoder": {"num_layers": 1, "hidden_dim": 4, "embed_dim": 4},
            "train": {"batch_size": 16, "epochs": 1},
            "data": {"source": {"kind": "csv", "train": "train.csv", "test": "test.csv", "label_column": "label",
                                "seg_len": 8, "stride": 2}}}"#,
    );
    let out = tmp.path().join("out");
    let o = fedexdnn(&["local", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("round_001.json"));
    assert!(report["report"]["metrics"]["at_threshold"]["f1"].is_number());
}

#[test]
fn exemplar_sweep_emits_one_report_per_size() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("k");
    let o = fedexdnn(&["local", "--config", &cfg, "--out", out.to_str().unwrap(), "--exemplars", "8,16,32,64,128"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for k in [8, 16, 32, 64, 128] {
        let r = read_json(&out.join(format!("k{k}")).join("round_001.json"));
        assert_eq!(r["config"]["exemplars"], k);
    }
}

#[test]
fn ablation_variants_zero_the_named_terms() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("abl");
    let o = fedexdnn(&[
        "ablate", "--config", &cfg, "--out", out.to_str().unwrap(), "--toggle", "absolute", "--toggle", "balance",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let full = read_json(&out.join("full/round_001.json"));
    assert_eq!(full["config"]["loss"]["absolute_weight"], 1.0);
    let wo_abs = read_json(&out.join("wo_absolute/round_001.json"));
    assert_eq!(wo_abs["config"]["loss"]["absolute_weight"], 0.0);
    assert_eq!(wo_abs["config"]["loss"]["balance_weight"], 1.0);
    let wo_bal = read_json(&out.join("wo_balance/round_001.json"));
    assert_eq!(wo_bal["config"]["loss"]["balance_weight"], 0.0);

    let o = fedexdnn(&["ablate", "--config", &cfg, "--toggle", "margin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cluster, balance, absolute, drp"), "{}", stderr(&o));
}

#[test]
fn empty_toggle_set_runs_the_full_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("abl");
    let o = fedexdnn(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let full = read_json(&out.join("full/round_001.json"));
    for term in ["cluster_weight", "drp_weight", "balance_weight", "absolute_weight"] {
        assert_eq!(full["config"]["loss"][term], 1.0);
    }
}

#[test]
fn contamination_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("contam");
    let o = fedexdnn(&[
        "ablate", "--config", &cfg, "--out", out.to_str().unwrap(), "--contaminate", "0.01,0.05",
        "--balance-weights", "0,1,5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 7);
    let r = read_json(&out.join("full_c0.05_bal5/round_001.json"));
    assert_eq!(r["config"]["loss"]["balance_weight"], 5.0);
    assert_eq!(r["config"]["data"]["source"]["train_anomaly_fraction"], 0.05);
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        fedexdnn_cli::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 3);
}
