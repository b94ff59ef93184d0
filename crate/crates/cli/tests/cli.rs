use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/reviews.xml");

fn absa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_absa-cd"))
        .args(args)
        .env_remove("OPENAI_API_KEY")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = absa(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn jsonl(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn ingested(dir: &Path) -> PathBuf {
    let out = dir.join("all.jsonl");
    ok(&["ingest", "--in", FIXTURE, "--out", s(&out)]);
    out
}

/// Script that replays every gold target.
fn gold_script(dir: &Path, all: &Path, task: &str) -> PathBuf {
    let pairs = dir.join(format!("pairs-{task}.jsonl"));
    ok(&["build-data", "--in", s(all), "--out", s(&pairs), "--task", task]);
    let script: String = jsonl(&pairs)
        .iter()
        .map(|p| format!("{}\t{}\n", p["id"].as_str().unwrap(), p["target"].as_str().unwrap()))
        .collect();
    let path = dir.join(format!("script-{task}.tsv"));
    fs::write(&path, script).unwrap();
    path
}

#[test]
fn ingest_writes_records_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let out = ingested(dir.path());
    let recs = jsonl(&out);
    assert_eq!(recs.len(), 4);
    assert_eq!(recs[0]["id"], "1:0");
    assert_eq!(recs[0]["tuples"][1]["aspect"], "NULL");
    let prov: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("all.jsonl.run.json")).unwrap()).unwrap();
    assert_eq!(prov["command"], "ingest");
}

#[test]
fn stats_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let table = ok(&["stats", "--in", FIXTURE]);
    assert!(table.contains("Sentences          4"), "{table}");
    assert!(table.contains("(1 sentences without opinions dropped)"), "{table}");
    let all = ingested(dir.path());
    let v: Value = serde_json::from_str(&ok(&["stats", "--in", s(&all), "--json"])).unwrap();
    for (k, want) in [
        ("sentences", 4),
        ("triplets", 6),
        ("categories", 6),
        ("positive", 3),
        ("negative", 2),
        ("neutral", 1),
        ("null_aspects", 2),
    ] {
        assert_eq!(v[k], want, "{k}");
    }
    let kept: Value = serde_json::from_str(&ok(&["stats", "--in", FIXTURE, "--keep-empty", "--json"])).unwrap();
    assert_eq!(kept["sentences"], 5);
}

#[test]
fn split_partitions_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let all = ingested(dir.path());
    let (tr, dv) = (dir.path().join("tr.jsonl"), dir.path().join("dv.jsonl"));
    ok(&["split", "--in", s(&all), "--train", s(&tr), "--dev", s(&dv), "--ratio", "1:1"]);
    let (a, b) = (jsonl(&tr), jsonl(&dv));
    assert_eq!((a.len(), b.len()), (2, 2));
    let mut ids: Vec<String> = a.iter().chain(&b).map(|r| r["id"].as_str().unwrap().to_string()).collect();
    ids.sort();
    assert_eq!(ids, ["1:0", "1:1", "2:0", "2:1"]);
    let first = fs::read(&tr).unwrap();
    ok(&["split", "--in", s(&all), "--train", s(&tr), "--dev", s(&dv), "--ratio", "1:1"]);
    assert_eq!(fs::read(&tr).unwrap(), first);
}

#[test]
fn build_data_renders_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let all = ingested(dir.path());
    let out = dir.path().join("pairs.jsonl");
    ok(&["build-data", "--in", s(&all), "--out", s(&out), "--task", "tasd"]);
    let pairs = jsonl(&out);
    assert_eq!(pairs[0]["input"], "They offer a tasty soup & tea | [A] [C] [P]");
    assert_eq!(
        pairs[0]["target"],
        "[A] soup [C] food quality [P] great [;] [A] it [C] restaurant general [P] great"
    );
    ok(&["build-data", "--in", s(&all), "--out", s(&out), "--task", "e2e"]);
    assert_eq!(jsonl(&out)[3]["target"], "[A] it [P] great");
}

#[test]
fn decode_gold_script_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let all = ingested(dir.path());
    for task in ["tasd", "acte", "e2e"] {
        for mode in ["bag", "trie"] {
            let script = gold_script(dir.path(), &all, task);
            let pred = dir.path().join(format!("pred-{task}-{mode}.jsonl"));
            let scorer = format!("scripted:{}", s(&script));
            ok(&[
                "decode", "--input", s(&all), "--out", s(&pred), "--scorer", &scorer, "--task", task, "--mode", mode,
            ]);
            let v: Value = serde_json::from_str(&ok(&[
                "eval", "--pred", s(&pred), "--gold", s(&all), "--task", task, "--json",
            ]))
            .unwrap();
            assert_eq!(v["runs"][0]["f1"], 1.0, "{task} {mode}: {v}");
        }
    }
}

#[test]
fn decode_random_is_reproducible_and_constrained() {
    let dir = tempfile::tempdir().unwrap();
    let all = ingested(dir.path());
    let out = dir.path().join("pred.jsonl");
    let det = dir.path().join("det.jsonl");
    let mut runs = Vec::new();
    for _ in 0..2 {
        ok(&[
            "decode", "--input", s(&all), "--out", s(&out), "--scorer", "random:7", "--mode", "trie",
            "--details", s(&det),
        ]);
        runs.push((fs::read(&out).unwrap(), fs::read(det.as_path()).unwrap(), fs::read(dir.path().join("pred.jsonl.run.json")).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    for d in jsonl(&det) {
        assert!(d["diagnostics"].as_array().unwrap().is_empty(), "{d}");
    }
}

#[test]
fn eval_aggregates_runs() {
    let dir = tempfile::tempdir().unwrap();
    let all = ingested(dir.path());
    let report = dir.path().join("report.json");
    let table = ok(&[
        "eval", "--pred", s(&all), s(&all), s(&all), "--gold", s(&all), "--report", s(&report),
    ]);
    assert!(table.contains("F1 over 3 runs: 1.0000 ± 0.0000"), "{table}");
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["runs"].as_array().unwrap().len(), 3);
}

#[test]
fn explain_constraints_reports_row_and_candidates() {
    let out = ok(&["explain-constraints", "--prefix", "[A] soup [", "--sentence", "a tasty soup"]);
    assert!(out.contains("row: AfterAspectOpen"), "{out}");
    assert!(out.contains("candidates (1): C\n"), "{out}");
    let out = absa(&["explain-constraints", "--prefix", "[A] ta", "--sentence", "a tasty soup", "--mode", "trie"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not reachable"));
    let out = ok(&["explain-constraints", "--prefix", "", "--sentence", "a tasty soup"]);
    assert!(out.contains("candidates (1): ["), "{out}");
}

#[test]
fn config_errors_are_listed_together() {
    let out = absa(&[
        "decode", "--input", "/no/such.jsonl", "--out", "/no/dir/out.jsonl", "--scorer", "remote", "--max-len", "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["/no/such.jsonl", "/no/dir", "--max-len", "--endpoint"] {
        assert!(err.contains(needle), "missing {needle}: {err}");
    }
}

#[test]
fn missing_credential_is_a_config_error() {
    let out = absa(&[
        "prompt", "--sentence", "x", "--endpoint", "http://127.0.0.1:9", "--out", "/tmp/unused.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("OPENAI_API_KEY"));
}

#[test]
fn prompt_renders_without_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let all = ingested(dir.path());
    let out = ok(&["prompt", "--sentence", "The soup was tasty", "--train", s(&all), "--shots", "2"]);
    assert!(out.ends_with("Sentence: The soup was tasty\nOutput:\n"), "{out}");
    assert_eq!(out.matches("Sentence: ").count(), 3);
    let lines = ok(&["prompt", "--in", s(&all), "--task", "e2e"]);
    assert_eq!(lines.lines().count(), 4);
    assert!(!lines.contains("category must be"));
}

#[test]
fn too_few_demonstrations_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let all = ingested(dir.path());
    let out = absa(&["prompt", "--sentence", "x", "--train", s(&all), "--shots", "10"]);
    assert_eq!(out.status.code(), Some(2));
}

/// Answers every request with the same chat completion.
fn serve_forever(content: &str) -> String {
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let body = serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": 1, "completion_tokens": 1, "total_tokens": 2}
    })
    .to_string();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            let _ = reader.read_exact(&mut buf);
            let _ = write!(
                reader.get_mut(),
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    format!("http://{addr}")
}

#[test]
fn remote_decode_constrains_llm_reply() {
    let dir = tempfile::tempdir().unwrap();
    let all = ingested(dir.path());
    let one = dir.path().join("one.jsonl");
    fs::write(&one, fs::read_to_string(&all).unwrap().lines().nth(3).unwrap().to_string() + "\n").unwrap();
    // "Prices" is not the gold aspect but is a sentence span, so it survives
    let url = serve_forever("Sure!\n[A] Prices [C] restaurant prices [P] great.");
    let out = dir.path().join("pred.jsonl");
    let status = Command::new(env!("CARGO_BIN_EXE_absa-cd"))
        .args(["decode", "--input", s(&one), "--out", s(&out), "--scorer", "remote", "--endpoint", &url])
        .args(["--api-key-env", "ABSA_CLI_TEST_KEY"])
        .env("ABSA_CLI_TEST_KEY", "k")
        .status()
        .unwrap();
    assert!(status.success());
    let pred = jsonl(&out);
    assert_eq!(pred[0]["tuples"][0]["aspect"], "Prices");
    assert_eq!(pred[0]["tuples"][0]["category"], "RESTAURANT#PRICES");

    let out = dir.path().join("prompted.jsonl");
    let status = Command::new(env!("CARGO_BIN_EXE_absa-cd"))
        .args(["prompt", "--in", s(&all), "--out", s(&out), "--endpoint", &url])
        .args(["--api-key-env", "ABSA_CLI_TEST_KEY"])
        .env("ABSA_CLI_TEST_KEY", "k")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(jsonl(&out).len(), 4);
}
