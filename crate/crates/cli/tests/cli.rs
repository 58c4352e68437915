use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use marn::trainer::Checkpoint;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().display();
        let cfg = format!(
            r#"seed = 5
[model]
d_e = 8
d_r = 4
[train]
max_epochs = 3
batch_size = 8
[synth]
n_docs = 60
n_icd = 6
n_ccs = 3
vocab_size = 40
min_len = 10
max_len = 16
embedding_dim = 8
[data]
corpus = "{d}/data/corpus.csv"
mapping = "{d}/data/mapping.csv"
embeddings = "{d}/data/embeddings.txt"
output_dir = "{d}/out"
{extra}"#
        );
        std::fs::write(dir.path().join("run.toml"), cfg).unwrap();
        Run { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn marn(&self, args: &[&str]) -> Output {
        let cfg = self.path("run.toml");
        Command::new(env!("CARGO_BIN_EXE_marn"))
            .arg("--config")
            .arg(&cfg)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.marn(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn prepared(extra: &str) -> Self {
        let r = Run::new(extra);
        r.ok(&["synth"]);
        r.ok(&["preprocess"]);
        r
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn synth_writes_three_deterministic_files() {
    let r = Run::new("");
    let out = r.ok(&["synth"]);
    assert!(out.contains("60 documents"), "{out}");
    let files = ["data/corpus.csv", "data/mapping.csv", "data/embeddings.txt"].map(|f| r.path(f));
    let first: Vec<Vec<u8>> = files.iter().map(|f| read(f)).collect();
    let rows = String::from_utf8(first[0].clone()).unwrap().lines().count();
    assert_eq!(rows, 61);
    r.ok(&["synth"]);
    let second: Vec<Vec<u8>> = files.iter().map(|f| read(f)).collect();
    assert_eq!(first, second);
}

#[test]
fn synth_rejects_more_ccs_than_icd_codes() {
    let r = Run::new("");
    let text = std::fs::read_to_string(r.path("run.toml")).unwrap().replace("n_ccs = 3", "n_ccs = 6");
    std::fs::write(r.path("run.toml"), text).unwrap();
    let out = r.marn(&["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_ccs"));
}

#[test]
fn unknown_config_keys_exit_with_usage_code() {
    let r = Run::new("bogus = 1");
    assert_eq!(r.marn(&["synth"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_usage_code() {
    let r = Run::new("");
    let out = r.marn(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(r.marn(&["preprocess"]).status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_with_usage_code() {
    let r = Run::new("");
    r.ok(&["synth"]);
    std::fs::write(r.path("blocker"), "").unwrap();
    let out = r.marn(&["--output-dir", r.path("blocker/sub").to_str().unwrap(), "preprocess"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_evaluate_analyze_round_trip() {
    let r = Run::prepared("");
    for f in ["out/train.csv", "out/val.csv", "out/test.csv", "out/vocab.txt"] {
        assert!(r.path(f).exists(), "{f}");
    }
    r.ok(&["train"]);
    let history = read(&r.path("out/history.jsonl"));
    let lines: Vec<serde_json::Value> = String::from_utf8(history.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for (i, rec) in lines.iter().enumerate() {
        assert_eq!(rec["epoch"], i + 1);
        for key in ["train_loss", "val_p_at_k", "val_micro_f1", "stopped_early"] {
            assert!(rec.get(key).is_some(), "{key}");
        }
    }
    let ckpt = read(&r.path("out/model.ckpt"));

    r.ok(&["train"]);
    assert_eq!(read(&r.path("out/history.jsonl")), history);
    assert_eq!(read(&r.path("out/model.ckpt")), ckpt);

    r.ok(&["evaluate"]);
    let report = read(&r.path("out/metrics.json"));
    r.ok(&["evaluate"]);
    assert_eq!(read(&r.path("out/metrics.json")), report);
    let json: serde_json::Value = serde_json::from_slice(&report).unwrap();
    for branch in ["icd", "ccs"] {
        let b = &json[branch];
        for key in ["macro_f1", "micro_f1"] {
            let v = b[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{branch}.{key} = {v}");
        }
        for key in ["macro_auc", "micro_auc"] {
            if let Some(v) = b[key].as_f64() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        for v in b["p_at_k"].as_object().unwrap().values() {
            assert!((0.0..=1.0).contains(&v.as_f64().unwrap()));
        }
    }

    r.ok(&["analyze", "pca"]);
    let pca = std::fs::read_to_string(r.path("out/pca.tsv")).unwrap();
    assert_eq!(pca.lines().count(), 1 + 6 + 3);

    let out = r.ok(&["analyze", "ccs-significance"]);
    assert!(out.contains("significant CCS codes:"), "{out}");
    assert_eq!(out.lines().count(), 1 + 3);

    r.ok(&["analyze", "loss-profile", "--corpus", r.path("out/train.csv").to_str().unwrap()]);
    let prof = std::fs::read_to_string(r.path("out/loss_profile.tsv")).unwrap();
    assert_eq!(prof.lines().count(), 1 + 6);
}

#[test]
fn unknown_analysis_lists_the_valid_names() {
    let r = Run::new("");
    let out = r.marn(&["analyze", "tsne"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["loss-profile", "pca", "ccs-significance"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn ablation_flags_reach_the_checkpoint() {
    let r = Run::prepared("");
    r.ok(&["--no-ram", "--no-mtl", "--no-focal", "train"]);
    let ck = Checkpoint::load(r.path("out/model.ckpt")).unwrap();
    let ab = ck.train.ablation;
    assert!(!ab.use_ram && !ab.use_mtl && !ab.use_focal);
    assert_eq!(ck.train.loss.lambda_d, 0.7);
}

#[test]
fn seed_flag_overrides_the_config() {
    let r = Run::prepared("");
    r.ok(&["train"]);
    let a = read(&r.path("out/model.ckpt"));
    r.ok(&["--seed", "6", "train"]);
    let ck = Checkpoint::load(r.path("out/model.ckpt")).unwrap();
    assert_eq!(ck.train.seed, 6);
    assert_ne!(read(&r.path("out/model.ckpt")), a);
}

#[test]
fn mismatched_config_is_rejected_at_evaluation() {
    let r = Run::prepared("");
    r.ok(&["train"]);
    let text = std::fs::read_to_string(r.path("run.toml")).unwrap().replace("d_r = 4", "d_r = 8");
    std::fs::write(r.path("run.toml"), text).unwrap();
    let out = r.marn(&["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn divergence_exits_with_numeric_code_and_epoch() {
    let r = Run::prepared("");
    let text = std::fs::read_to_string(r.path("run.toml"))
        .unwrap()
        .replace("[train]\n", "[train]\nlearning_rate = 1e30\n");
    std::fs::write(r.path("run.toml"), text).unwrap();
    let out = r.marn(&["train"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(3), "{err}");
    assert!(err.contains("epoch "), "{err}");
}
