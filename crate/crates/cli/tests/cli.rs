use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn paraug(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paraug"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_dataset(dir: &Path, name: &str, n: usize) -> PathBuf {
    let words = ["calm", "storm", "meadow", "lantern", "harvest", "orbit", "velvet", "quartz"];
    let body: String = (0..n)
        .map(|i| {
            let text: Vec<&str> = (0..5).map(|k| words[(i + 3 * k) % words.len()]).collect();
            format!(
                "{{\"id\":\"s{i}\",\"text\":\"{} {i}\",\"label\":\"{}\"}}\n",
                text.join(" "),
                ["pos", "neg"][i % 2]
            )
        })
        .collect();
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn write_dynamics(dir: &Path, n: usize) -> PathBuf {
    let mut body = String::new();
    for i in 0..n {
        for epoch in 0..2 {
            let x = (i as f64 * 0.37 + epoch as f64).sin();
            body.push_str(&format!(
                "{{\"sample_id\":\"s{i}\",\"epoch\":{epoch},\"logits\":[{x},{}],\"gold_index\":{}}}\n",
                -x,
                i % 2
            ));
        }
    }
    let path = dir.join("dynamics.jsonl");
    std::fs::write(&path, body).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn augment_dry_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), "d.jsonl", 12);
    for out in ["a", "b"] {
        let o = paraug(dir.path(), &["augment", "--dataset", "d.jsonl", "--dry-run", "--seed", "3", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("-> 12 samples"));
    }
    let a = std::fs::read(dir.path().join("a/augmented.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/augmented.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 12);
    assert_eq!(read_json(&dir.path().join("a/manifest.json"))["status"], "ok");
}

#[test]
fn config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), "d.jsonl", 12);
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"dataset": "d.jsonl", "dry_run": true, "top_n": 2, "out_dir": "from-config"}"#,
    )
    .unwrap();
    let o = paraug(dir.path(), &["--config", "cfg.json", "augment"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("-> 16 samples"), "{}", stdout(&o));
    assert!(dir.path().join("from-config/augmented.jsonl").exists());

    let o = paraug(dir.path(), &["--config", "cfg.json", "--out", "flag", "augment", "--top-n", "1"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("-> 12 samples"));
    assert!(dir.path().join("flag/manifest.json").exists());
}

#[test]
fn score_then_select() {
    let dir = tempfile::tempdir().unwrap();
    write_dynamics(dir.path(), 30);
    let o = paraug(dir.path(), &["score", "--dynamics", "dynamics.jsonl", "--method", "aum", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = paraug(dir.path(), &["select", "--scores", "o/scores.jsonl", "--ratio", "1:1:1", "--out", "o"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("augment 10 / retain 10 / prune 10"));
    let split = read_json(&dir.path().join("o/split.json"));
    assert_eq!(split["method"], "aum");

    let o = paraug(
        dir.path(),
        &["select", "--scores", "o/scores.jsonl", "--strategy", "ccs", "--bins", "5", "--seed", "9", "--out", "c"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(&dir.path().join("c/split.json"))["augment"].as_array().unwrap().len(), 10);
}

#[test]
fn embed_then_diversity_then_report() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), "small.jsonl", 10);
    write_dataset(dir.path(), "large.jsonl", 16);
    let o = paraug(dir.path(), &["embed", "--dataset", "large.jsonl", "--dry-run", "--out", "v"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = paraug(
        dir.path(),
        &["diversity", "--dataset", "large.jsonl", "--vectors", "v/vectors.jsonl", "--out", "r"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("Homogeneity"));
    let o = paraug(dir.path(), &["diversity", "--dataset", "small.jsonl", "--dry-run", "--out", "r"]);
    assert_eq!(code(&o), 0);
    let o = paraug(dir.path(), &["report", "r/report_small.json", "r/report_large.json", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("Average"));
    let table = read_json(&dir.path().join("r/normalized.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);

    let o = paraug(
        dir.path(),
        &["affinity", "--augmented", "large.jsonl", "--original", "large.jsonl", "--dry-run", "--out", "r"],
    );
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("affinity exact"));
}

#[test]
fn prefs_writes_both_training_sets() {
    let dir = tempfile::tempdir().unwrap();
    let body: String = (0..8)
        .map(|i| {
            format!(
                "{{\"original\":\"source {i} text\",\"paraphrases\":[\"a {i}\",\"the source {i} text again\",\"text {i} from the source, said at much greater length\"]}}\n"
            )
        })
        .collect();
    std::fs::write(dir.path().join("corpus.jsonl"), body).unwrap();
    let o = paraug(dir.path(), &["prefs", "--corpus", "corpus.jsonl", "--dry-run", "--out", "p"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sft = std::fs::read_to_string(dir.path().join("p/sft.jsonl")).unwrap();
    let dpo = std::fs::read_to_string(dir.path().join("p/dpo.jsonl")).unwrap();
    assert_eq!(sft.lines().count(), 12);
    assert_eq!(dpo.lines().count(), 4);
    for line in dpo.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 3);
        assert_ne!(v["chosen"], v["rejected"]);
    }
}

#[test]
fn dpo_check_recomputes_loss() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("log.jsonl"),
        "{\"logp_chosen_policy\":-9,\"logp_rejected_policy\":-13,\"logp_chosen_ref\":-10,\"logp_rejected_ref\":-12,\"loss\":0.5981389}\n",
    )
    .unwrap();
    let o = paraug(dir.path(), &["dpo-check", "--log", "log.jsonl", "--out", "o"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("mean loss 0.598139"), "{}", stdout(&o));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), "d.jsonl", 12);
    write_dynamics(dir.path(), 12);

    // usage and validation errors
    assert_eq!(code(&paraug(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&paraug(dir.path(), &["augment", "--dataset", "d.jsonl", "--dry-run", "--ratio", "1:0:1"])), 1);
    assert_eq!(code(&paraug(dir.path(), &["augment", "--dataset", "d.jsonl", "--dry-run", "--top-n", "9"])), 1);
    std::fs::write(dir.path().join("dup.jsonl"), "{\"id\":\"a\",\"text\":\"x\",\"label\":\"l\"}\n{\"id\":\"a\",\"text\":\"y\",\"label\":\"l\"}\n").unwrap();
    assert_eq!(code(&paraug(dir.path(), &["diversity", "--dataset", "dup.jsonl", "--dry-run"])), 1);
    assert_eq!(code(&paraug(dir.path(), &["--help"])), 0);

    // I/O and provider failures
    assert_eq!(code(&paraug(dir.path(), &["diversity", "--dataset", "missing.jsonl", "--dry-run"])), 2);
    std::fs::write(
        dir.path().join("offline.json"),
        r#"{"embedding": {"endpoint_url": "http://127.0.0.1:9", "max_retries": 0},
            "generation": {"endpoint_url": "http://127.0.0.1:9", "max_retries": 0}}"#,
    )
    .unwrap();
    let o = paraug(
        dir.path(),
        &["--config", "offline.json", "augment", "--dataset", "d.jsonl", "--dynamics", "dynamics.jsonl", "--out", "x"],
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = read_json(&dir.path().join("x/manifest.json"));
    assert_eq!(manifest["status"], "failed");
    assert_eq!(manifest["failure"]["stage"], "generate");
}
