use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const SMALL: &str = r#"
seed = 3

[dataset.synthetic]
num_speakers = 10
num_noisy_speakers = 4
utterances_per_speaker = 10
segment_len = 40
feature_dim = 16
cluster_separation = 6.0
noise_sigma = 1.0
bucket_size = 5
seed = 3

[session]
max_mem = 40
embed_dim = 32

[session.agent]
num_buckets = 2
num_speakers = 10

[session.train]
epochs = 3
"#;

fn consentctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_consentctl"))
        .args(args)
        .output()
        .expect("spawn consentctl")
}

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, format!("{SMALL}{extra}")).unwrap();
    (tmp, cfg)
}

fn run_ok(args: &[&str]) -> Value {
    let out = consentctl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn error_record(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("json error record on stderr")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let (tmp, cfg) = setup("\n[session.sampler]\nbogus = 1\n");
    let out = consentctl(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["kind"], "config");
    assert!(rec["message"].as_str().unwrap().contains("sampler"));
}

#[test]
fn invalid_value_is_a_config_error() {
    let (tmp, cfg) = setup("");
    let out = consentctl(&[
        "register",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("r")),
        "--pcnt-old",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let (tmp, cfg) = setup("");
    let out = consentctl(&[
        "eval",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("none")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn zero_epochs_leaves_empty_history() {
    let (tmp, cfg) = setup("");
    let dir = tmp.path().join("r");
    let report = run_ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir),
        "--epochs",
        "0",
    ]);
    assert_eq!(report["epochs"], 0);
    assert_eq!(
        std::fs::read_to_string(dir.join("history.jsonl")).unwrap(),
        ""
    );
    assert!(dir.join("checkpoints/classifier.ckpt").exists());
}

#[test]
fn lifecycle_commands() {
    let (tmp, cfg) = setup("");
    let dir = tmp.path().join("r");
    let (c, d) = (s(&cfg), s(&dir));

    let train = run_ok(&["train", "--config", c, "--out", d]);
    assert!(train["epochs"].as_u64().unwrap() >= 1);
    let lines = std::fs::read_to_string(dir.join("history.jsonl")).unwrap();
    assert_eq!(
        lines.lines().count() as u64,
        train["epochs"].as_u64().unwrap()
    );

    let noop = run_ok(&["register", "--config", c, "--out", d, "--new-speakers", "0"]);
    assert_eq!(noop["rounds"].as_array().unwrap().len(), 0);

    let out = consentctl(&[
        "remove",
        "--config",
        c,
        "--out",
        d,
        "--bucket",
        "0",
        "--speakers",
        "7",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_record(&out)["kind"], "domain");

    let out = consentctl(&[
        "rereg",
        "--config",
        c,
        "--out",
        d,
        "--bucket",
        "0",
        "--speakers",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));

    let removed = run_ok(&[
        "remove",
        "--config",
        c,
        "--out",
        d,
        "--bucket",
        "0",
        "--speakers",
        "1",
    ]);
    assert_eq!(removed["buckets"][0]["bucket"], 0);
    assert!((removed["buckets"][0]["target"].as_f64().unwrap() - 0.8).abs() < 1e-12);

    let registered = run_ok(&["register", "--config", c, "--out", d, "--new-speakers", "4"]);
    let ids: Vec<u64> = registered["speakers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(ids, vec![10, 11, 12, 13]);

    let eval = run_ok(&["eval", "--config", c, "--out", d]);
    let hardest = eval["report"]["prefixes"]
        .as_array()
        .unwrap()
        .last()
        .unwrap()
        .clone();
    let export = run_ok(&["export-embeddings", "--config", c, "--out", d]);
    assert_eq!(export["rows"], hardest["utterances"]);
    assert!(dir.join("embeddings.spkf").exists());
    assert!(dir.join("eval.json").exists());
}

fn artifact_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in std::fs::read_dir(&p).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timing.jsonl" {
                let bytes = std::fs::read(&path).unwrap();
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(
                    rel,
                    Sha256::digest(&bytes)
                        .iter()
                        .map(|b| format!("{b:02x}"))
                        .collect::<String>(),
                );
            }
        }
    }
    out
}

#[test]
fn identical_config_gives_identical_artifacts() {
    let (tmp, cfg) = setup("");
    let c = s(&cfg);
    let mut hashes = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let d = s(&dir);
        let mut per_command = Vec::new();
        for args in [
            vec!["train"],
            vec!["register", "--new-speakers", "2"],
            vec!["remove", "--bucket", "1", "--speakers", "6"],
            vec!["rereg", "--bucket", "1", "--speakers", "6"],
            vec!["eval"],
            vec!["export-embeddings"],
        ] {
            let mut full = args.clone();
            full.extend(["--config", c, "--out", d]);
            run_ok(&full);
            per_command.push(artifact_hashes(&dir));
        }
        hashes.push(per_command);
    }
    assert_eq!(hashes[0], hashes[1]);
}

fn eer_after(config: &str, epochs: &str) -> f64 {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    let dir = tmp.path().join("r");
    let (c, d) = (s(&cfg), s(&dir));
    run_ok(&["train", "--config", c, "--out", d, "--epochs", epochs]);
    run_ok(&["eval", "--config", c, "--out", d])["verification"]["eer"]
        .as_f64()
        .unwrap()
}

#[test]
fn untrained_encoder_on_uninformative_features_is_near_chance() {
    let flat = SMALL.replace("cluster_separation = 6.0", "cluster_separation = 0.0");
    let eer = eer_after(&flat, "0");
    assert!((eer - 0.5).abs() < 0.1, "eer {eer}");
}

#[test]
fn trained_run_verifies_well() {
    let eer = eer_after(SMALL, "3");
    assert!(eer < 0.05, "eer {eer}");
}
