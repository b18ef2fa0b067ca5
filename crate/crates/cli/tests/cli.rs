use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::{Command, Output};
use std::thread;

use rechunk::TestEmbedder;
use serde_json::{json, Value};

fn mini() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/mini")
}

fn rechunk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rechunk"))
        .args(args)
        .env_remove("RECHUNK_SIDECAR_URL")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_reports_that_report_renders() {
    let out = tempfile::tempdir().unwrap();
    let mini = mini();
    let o = rechunk(&[
        "run",
        "--mock-providers",
        "--dataset",
        mini.to_str().unwrap(),
        "--retrieval",
        "rfr",
        "--contextualize",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("FCC  RFR"));
    assert!(out.path().join("manifests.json").exists());

    let table = rechunk(&["report", out.path().to_str().unwrap()]);
    assert_eq!(table.status.code(), Some(0));
    assert_eq!(stdout(&table), stdout(&o));

    let json = rechunk(&[
        "report",
        "--format",
        "json",
        out.path().join("reports.jsonl").to_str().unwrap(),
    ]);
    let line: Value = serde_json::from_str(stdout(&json).trim()).unwrap();
    assert_eq!(line["chunking"], "FCC");
}

#[test]
fn grid_emits_eight_cells() {
    let out = tempfile::tempdir().unwrap();
    let mini = mini();
    let o = rechunk(&[
        "grid",
        "--mock-providers",
        "--dataset",
        mini.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let reports = std::fs::read_to_string(out.path().join("reports.jsonl")).unwrap();
    assert_eq!(reports.lines().count(), 8);

    let subset = rechunk(&[
        "grid",
        "--mock-providers",
        "--dataset",
        mini.to_str().unwrap(),
        "--methods",
        "FUC,FCC",
        "--retrievals",
        "rfr",
    ]);
    assert_eq!(subset.status.code(), Some(0));
    assert_eq!(stdout(&subset).lines().count(), 4);
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    let body = format!(
        "retrieval_method = \"RFR\"\ncontextualize = true\n\n[dataset]\ncorpus = \"{0}/corpus.jsonl\"\nqueries = \"{0}/queries.jsonl\"\nqrels = \"{0}/qrels/test.tsv\"\n",
        mini().display()
    );
    std::fs::write(&path, body).unwrap();
    let o = rechunk(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("FCC  RFR"));

    let o = rechunk(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--retrieval",
        "tr",
    ]);
    assert!(stdout(&o).contains("FCC  TR"));
}

#[test]
fn validation_errors_exit_1() {
    let mini = mini();
    let o = rechunk(&[
        "run",
        "--mock-providers",
        "--dataset",
        mini.to_str().unwrap(),
        "--chunking-mode",
        "late",
        "--contextualize",
    ]);
    assert_eq!(o.status.code(), Some(1));

    let o = rechunk(&["run", "--mock-providers", "--dataset", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(1));

    let o = rechunk(&["run", "--retrieval", "bm25"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unreachable_provider_exits_2() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mini = mini();
    let o = rechunk(&[
        "run",
        "--dataset",
        mini.to_str().unwrap(),
        "--endpoint",
        &format!("http://127.0.0.1:{port}"),
    ]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Sidecar whose reranker always fails.
fn broken_reranker() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    thread::spawn(move || {
        let embedder = TestEmbedder::new(Default::default()).unwrap();
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap().to_string();
            let mut len = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let (status, payload) = match path.as_str() {
                "/v1/info" => (
                    200,
                    json!({"models": {}, "dim": 64, "max_tokens": 8192}).to_string(),
                ),
                "/v1/embed" => {
                    let req: Value = serde_json::from_slice(&body).unwrap();
                    let results: Vec<Value> = req["texts"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|t| {
                            let m = embedder.embed_text(t.as_str().unwrap());
                            let tokens: Vec<Value> = m
                                .tokens
                                .iter()
                                .map(|(s, e)| json!({"start": s, "end": e}))
                                .collect();
                            let vectors: Vec<&[f32]> = (0..m.len()).map(|i| m.row(i)).collect();
                            json!({"dim": m.dim, "tokens": tokens, "vectors": vectors})
                        })
                        .collect();
                    (200, json!({ "results": results }).to_string())
                }
                _ => (500, "reranker crashed".to_string()),
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    url
}

#[test]
fn degraded_run_exits_3() {
    let url = broken_reranker();
    let mini = mini();
    let o = rechunk(&[
        "run",
        "--dataset",
        mini.to_str().unwrap(),
        "--endpoint",
        &url,
        "--retrieval",
        "rfr",
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("FUC  RFR"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rerank skipped"));
}

#[test]
fn ingest_and_embed_fill_the_cache() {
    let cache = tempfile::tempdir().unwrap();
    let mini = mini();
    let common = [
        "--mock-providers",
        "--dataset",
        mini.to_str().unwrap(),
        "--cache-dir",
        cache.path().to_str().unwrap(),
    ];

    let o = rechunk(&[&["ingest"][..], &common].concat());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("documents     20 of 20"));
    assert!(cache.path().join("corpus.json").exists());

    let o = rechunk(&[&["embed"][..], &common].concat());
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = rechunk(&[&["contextualize"][..], &common].concat());
    assert_eq!(o.status.code(), Some(0));
    assert!(cache.path().join("contexts.jsonl").exists());

    let files: Vec<String> = std::fs::read_dir(cache.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(
        files.iter().any(|f| f.starts_with("embeddings-")),
        "{files:?}"
    );
    assert!(files.iter().any(|f| f.starts_with("index-")), "{files:?}");
}

#[test]
fn shipped_example_config_runs() {
    let cache = tempfile::tempdir().unwrap();
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/mini.toml");
    let o = rechunk(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--cache-dir",
        cache.path().to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("FCC  RFR"));
}
