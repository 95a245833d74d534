use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn setabs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setabs")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = setabs(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    setabs(dir, args).status.code().expect("exit code")
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = r#"{"seed": 3, "out": "o",
  "corpus": {"per_leaf": 20, "feature_dim": 6, "noise": 0.2},
  "sam": {"hidden": 8, "learning_rate": 0.01},
  "train": {"examples": 60, "epochs": 2, "baseline_epochs": 2},
  "eval": {"sets": 30, "ooo_sets": 20}, "tasks": {"per_n": 4, "vigilance_per_n": 2}}"#;

fn small_project() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), SMALL).unwrap();
    dir
}

const PIPELINE: [&str; 6] = ["build-graph", "propagate", "gen-corpus", "gen-train", "train", "gen-tasks"];

fn pipeline(dir: &Path) {
    for c in PIPELINE {
        ok(dir, &["--config", "run.json", c]);
    }
}

#[test]
fn generated_training_records_have_fifteen_targets() {
    let dir = small_project();
    for c in ["build-graph", "propagate", "gen-corpus"] {
        ok(dir.path(), &["--config", "run.json", c]);
    }
    ok(dir.path(), &["--config", "run.json", "--n", "4", "gen-train"]);
    let text = std::fs::read_to_string(dir.path().join("o/train_examples.ndjson")).unwrap();
    assert_eq!(text.lines().count(), 60);
    for line in text.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["video_ids"].as_array().unwrap().len(), 4);
        assert_eq!(rec["subsets"].as_array().unwrap().len(), 15);
    }
}

#[test]
fn oracle_completion_is_perfect() {
    let dir = small_project();
    pipeline(dir.path());
    let table = ok(dir.path(), &["--config", "run.json", "eval-completion", "--scorer", "oracle"]);
    assert!(table.contains("oracle"));
    let reports = json(dir.path().join("o/completion_report.json"));
    assert_eq!(reports.as_array().unwrap().len(), 4);
    for r in reports.as_array().unwrap() {
        assert_eq!(r["metrics"]["rho"], 1.0);
    }
}

fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.push((p.file_name().unwrap().into(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn identical_config_and_seed_give_identical_artifacts() {
    let a = small_project();
    let b = small_project();
    for d in [a.path(), b.path()] {
        pipeline(d);
        ok(d, &["--config", "run.json", "train", "--baseline", "classifier"]);
        ok(d, &["--config", "run.json", "eval-abstraction"]);
        ok(d, &["--config", "run.json", "eval-ooo"]);
    }
    let (x, y) = (artifacts(&a.path().join("o")), artifacts(&b.path().join("o")));
    assert_eq!(x.len(), y.len());
    assert_eq!(x.len(), 17);
    for ((n1, b1), (n2, b2)) in x.iter().zip(&y) {
        assert_eq!(n1, n2);
        assert!(b1 == b2, "{} differs", n1.display());
    }
    for m in ["train.json", "eval-abstraction.json"] {
        let mut ma = json(a.path().join("o/manifests").join(m));
        let mut mb = json(b.path().join("o/manifests").join(m));
        assert!(ma["created_unix_ms"].as_u64().unwrap() > 0);
        ma.as_object_mut().unwrap().remove("created_unix_ms");
        mb.as_object_mut().unwrap().remove("created_unix_ms");
        // inputs are recorded by absolute path; compare their hashes
        let hashes = |m: &mut Value| m.as_object_mut().unwrap().remove("inputs").unwrap().as_object().unwrap().values().cloned().collect::<Vec<_>>();
        assert_eq!(hashes(&mut ma), hashes(&mut mb));
        assert_eq!(ma, mb);
    }
    // a different seed changes the data
    ok(b.path(), &["--config", "run.json", "--seed", "4", "gen-corpus"]);
    assert_ne!(std::fs::read(a.path().join("o/features.bin")).unwrap(), std::fs::read(b.path().join("o/features.bin")).unwrap());
    assert_eq!(json(b.path().join("o/manifests/gen-corpus.json"))["seed"], 4);
}

#[test]
fn manifest_records_config_hash_versions_and_outputs() {
    let dir = small_project();
    ok(dir.path(), &["--config", "run.json", "build-graph"]);
    let m = json(dir.path().join("o/manifests/build-graph.json"));
    assert_eq!(m["command"], "build-graph");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert!(m["versions"]["setabs"].is_string());
    assert!(m["outputs"]["graph.json"].is_string());
    assert!(m["outputs"]["word_vectors.txt"].is_string());
}

#[test]
fn exit_codes_distinguish_missing_invalid_and_runtime_failures() {
    let dir = small_project();
    let d = dir.path();
    // missing inputs
    assert_eq!(code(d, &["--config", "run.json", "propagate"]), 2);
    assert_eq!(code(d, &["--config", "nope.json", "build-graph"]), 2);
    // validation
    std::fs::write(d.join("noseed.json"), r#"{"out": "o"}"#).unwrap();
    assert_eq!(code(d, &["--config", "noseed.json", "build-graph"]), 3);
    std::fs::write(d.join("extra.json"), r#"{"seed": 1, "colour": "red"}"#).unwrap();
    assert_eq!(code(d, &["--config", "extra.json", "build-graph"]), 3);
    assert_eq!(code(d, &["build-graph"]), 3);
    assert_eq!(code(d, &["--config", "run.json", "--set-size", "7", "build-graph"]), 3);
    std::fs::write(
        d.join("cycle.json"),
        r#"[{"id": "a", "name": "a", "parents": ["b"]}, {"id": "b", "name": "b", "parents": ["a"]}]"#,
    )
    .unwrap();
    std::fs::write(d.join("cyc.json"), r#"{"seed": 1, "out": "c", "graph": {"path": "cycle.json"}}"#).unwrap();
    assert_eq!(code(d, &["--config", "cyc.json", "build-graph"]), 3);
    // runtime: diverging training
    for c in ["build-graph", "propagate", "gen-corpus", "gen-train"] {
        ok(d, &["--config", "run.json", c]);
    }
    std::fs::write(d.join("hot.json"), SMALL.replace("\"learning_rate\": 0.01", "\"learning_rate\": 1e9")).unwrap();
    let out = setabs(d, &["--config", "hot.json", "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn pairs_only_flag_reaches_the_checkpoint() {
    let dir = small_project();
    for c in ["build-graph", "propagate", "gen-corpus", "gen-train"] {
        ok(dir.path(), &["--config", "run.json", c]);
    }
    ok(dir.path(), &["--config", "run.json", "--pairs-only", "train"]);
    let m = json(dir.path().join("o/manifests/train.json"));
    assert_eq!(m["config"]["sam"]["subset_mode"], "pairs_only");
    let table = ok(dir.path(), &["--config", "run.json", "--pairs-only", "eval-abstraction"]);
    assert!(table.contains("pairs-only"));
}

#[test]
fn human_report_from_a_response_log() {
    let dir = small_project();
    for c in ["build-graph", "propagate", "gen-corpus", "gen-tasks"] {
        ok(dir.path(), &["--config", "run.json", c]);
    }
    let tasks = json(dir.path().join("o/tasks.json"));
    let mut log = String::new();
    let mut scored = 0;
    for (i, t) in tasks.as_array().unwrap().iter().enumerate().take(10) {
        let ids: Vec<&str> = t["query_ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        let mut ranking: Vec<&str> = t["ground_truth_order"].as_array().unwrap().iter().map(|i| ids[i.as_u64().unwrap() as usize]).collect();
        let vig = t["is_vigilance"].as_bool().unwrap();
        if !vig {
            // alternate perfect and fully reversed rankings
            if scored % 2 == 1 {
                ranking.reverse();
            }
            scored += 1;
        }
        let rec = serde_json::json!({
            "session_id": "s1", "round_id": format!("r{i}"), "round_index": i, "task_id": t["task_id"],
            "n": t["reference_ids"].as_array().unwrap().len(), "order": [1, 2, 3, 4, 5], "ranking": ranking,
            "is_vigilance": vig, "vigilance_pass": if vig { Value::Bool(true) } else { Value::Null }, "timestamp_ms": 0
        });
        log.push_str(&format!("{rec}\n"));
    }
    std::fs::write(dir.path().join("o/responses.ndjson"), log).unwrap();
    ok(dir.path(), &["--config", "run.json", "report"]);
    let r = json(dir.path().join("o/human_report.json"));
    assert_eq!(r["included"], scored);
    let expected = if scored % 2 == 0 { 0.0 } else { 1.0 / scored as f64 };
    assert!((r["report"]["metrics"]["rho"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert_eq!(code(dir.path(), &["--config", "run.json", "report", "--log", "missing.ndjson"]), 2);
}

#[test]
fn serve_answers_round_requests() {
    use std::io::{Read, Write};
    let dir = small_project();
    for c in ["build-graph", "propagate", "gen-corpus", "gen-tasks"] {
        ok(dir.path(), &["--config", "run.json", c]);
    }
    assert_eq!(code(dir.path(), &["--config", "run.json", "serve", "--tasks", "none.json"]), 2);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_setabs"))
        .current_dir(dir.path())
        .args(["--config", "run.json", "serve"])
        .env("SETABS_PORT", port.to_string())
        .stdout(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let mut reply = String::new();
    for _ in 0..100 {
        if let Ok(mut s) = std::net::TcpStream::connect(("127.0.0.1", port)) {
            write!(s, "GET /api/round?session=t&n=2 HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
            s.read_to_string(&mut reply).unwrap();
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"status\":\"round\""));
    assert!(!reply.contains("ground_truth"));
}

#[test]
fn noiseless_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"seed": 11, "out": "o",
            "corpus": {"per_leaf": 50, "feature_dim": 32, "noise": 0.0},
            "sam": {"hidden": 64, "learning_rate": 0.05, "lr_step_epochs": 6},
            "train": {"examples": 4000, "epochs": 8},
            "eval": {"sets": 300, "ooo_sets": 200}, "tasks": {"per_n": 20, "vigilance_per_n": 4}}"#,
    )
    .unwrap();
    let d = dir.path();
    pipeline(d);
    for c in ["eval-abstraction", "eval-completion", "eval-ooo"] {
        ok(d, &["--config", "run.json", "--set-size", "3", c]);
    }
    let abs = json(d.join("o/abstraction_report.json"));
    let top1 = abs["reports"][0]["metrics"]["top1"].as_f64().unwrap();
    assert_eq!(abs["reports"][0]["n"], 3);
    assert!(top1 >= 0.99, "whole-set top-1 {top1}");
    let completion = json(d.join("o/completion_report.json"));
    assert!(completion[0]["metrics"]["rho"].as_f64().unwrap() > 0.0);
    let ooo = json(d.join("o/ooo_report.json"));
    assert!(ooo[0]["metrics"]["top1"].as_f64().unwrap() >= 0.9);
    for f in ["abstraction_table.txt", "completion_table.txt", "ooo_table.txt"] {
        assert!(d.join("o").join(f).is_file());
    }
}
