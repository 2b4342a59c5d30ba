use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: [&str; 14] = [
    "--classes", "6", "--per-class", "5", "--d-in", "8", "--num-unseen", "2", "--hidden", "16", "--embed-dim", "8",
    "--eval-ks", "5",
];

fn oan(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oan"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_reports_counts_and_is_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let o = oan(dir.path(), &["gen-data", "--classes", "15", "--per-class", "20"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("600 instances"));
    let ds = oan_core::dataset::CrossModalDataset::load(dir.path().join("dataset.oands")).unwrap();
    assert_eq!(ds.len(), 600);
}

#[test]
fn gen_data_seed_fixes_file_hash() {
    let [a, b, c] = [(); 3].map(|_| tempfile::tempdir().unwrap());
    oan(a.path(), &["--seed", "4", "gen-data"]);
    oan(b.path(), &["--seed", "4", "gen-data"]);
    oan(c.path(), &["--seed", "5", "gen-data"]);
    let f = |d: &tempfile::TempDir| sha(&d.path().join("dataset.oands"));
    assert_eq!(f(&a), f(&b));
    assert_ne!(f(&a), f(&c));
}

#[test]
fn train_smoke_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--epochs", "1", "--weights", "1,0.001,0.1"];
    args.extend(TINY);
    let o = oan(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("resolved config"));
    assert!(out.contains("\"lambda1\": 1.0") && out.contains("\"lambda2\": 0.001") && out.contains("\"lambda3\": 0.1"));
    for mode in ["real", "binary"] {
        let r = json(&dir.path().join(format!("report_{mode}.json")));
        assert!(r["map_all"].is_f64());
        assert!(r["prec"]["5"].is_f64());
        assert_eq!(r["mode"], mode);
        assert_eq!(r["num_queries"], 10);
    }
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    for key in ["epoch", "cls", "se", "in", "s_hcr", "t_hcr", "total", "lr"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join("checkpoint.oanck").exists());
}

#[test]
fn eval_reproduces_train_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--epochs", "2"];
    args.extend(TINY);
    assert!(oan(dir.path(), &args).status.success());
    let trained = json(&dir.path().join("report_real.json"));
    let ck = dir.path().join("checkpoint.oanck");
    let eval_dir = tempfile::tempdir().unwrap();
    let mut args = vec!["eval", "--checkpoint", ck.to_str().unwrap()];
    args.extend(&TINY[..6]);
    let o = oan(eval_dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&eval_dir.path().join("report_real.json")), trained);
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 3, "beta": 7.5}, "data": {"num_classes": 6, "per_class_per_modality": 5}}"#).unwrap();
    let o = oan(dir.path(), &["--config", cfg.to_str().unwrap(), "train", "--epochs", "1", "--num-unseen", "2", "--eval-ks", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = json(&dir.path().join("config.json"));
    assert_eq!(resolved["epochs"], 1);
    assert_eq!(resolved["beta"], 7.5);
    assert_eq!(resolved["batch_size"], 32);
    assert!(stdout(&o).contains("\"num_classes\": 6"));
}

#[test]
fn unknown_keys_and_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epoch": 3}}"#).unwrap();
    let o = oan(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));
    assert!(!oan(dir.path(), &["train", "--no-such-flag"]).status.success());
    assert!(!oan(dir.path(), &["train", "--batch-size", "1"]).status.success());
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = oan(dir.path(), &["eval", "--checkpoint", "/nonexistent/ck.oanck"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/ck.oanck"));
}

#[test]
fn ablate_emits_six_rows_in_grid_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--epochs", "1", "--seeds", "1,2"];
    args.extend(TINY);
    let o = oan(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&dir.path().join("ablation.json"));
    let rows = v["rows"].as_array().unwrap();
    let flags: Vec<(bool, bool, bool)> = rows
        .iter()
        .map(|r| (r["enable_in"].as_bool().unwrap(), r["enable_t_hcr"].as_bool().unwrap(), r["enable_s_hcr"].as_bool().unwrap()))
        .collect();
    assert_eq!(
        flags,
        [(false, false, false), (false, false, true), (true, false, false), (true, true, false), (true, false, true), (true, true, true)]
    );
    assert_eq!(rows[0]["label"], "baseline");
    assert_eq!(rows[0]["per_seed"].as_array().unwrap().len(), 2);
    assert!(rows[0]["map_all"]["mean"].is_f64() && rows[0]["map_all"]["std"].is_f64());
    let table = std::fs::read_to_string(dir.path().join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 8);
    assert!(stdout(&o).contains("mAP@all"));
}

#[test]
fn sweep_emits_twelve_cells_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--epochs", "1", "--seeds", "1"];
    args.extend(TINY);
    let o = oan(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&dir.path().join("sweep.json"));
    let cells = v["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 12);
    assert!(cells.iter().any(|c| c["lambda2"] == 0.001 && c["lambda3"] == 0.1));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("lambda2,lambda3,map_all,prec"));
    assert_eq!(lines.count(), 12);
}

#[test]
fn gradcheck_passes_by_default_and_fails_below_fd_floor() {
    let dir = tempfile::tempdir().unwrap();
    let o = oan(dir.path(), &["gradcheck", "--instances", "3"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for name in ["inter_class", "s_hcr", "t_hcr", "cls", "se", "total"] {
        assert!(out.contains(name), "{name} not listed");
    }
    let o = oan(dir.path(), &["gradcheck", "--instances", "2", "--tolerance", "1e-12"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("gradient check failed"));
}
