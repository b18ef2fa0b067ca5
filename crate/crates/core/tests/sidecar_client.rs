mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rechunk::error::{Error, ProviderError};
use rechunk::runner::{Providers, Session};
use rechunk::sidecar::SidecarClient;
use rechunk::{
    EmbeddingProvider, ExperimentConfig, LexicalTokenizer, LlmProvider, ProviderKind,
    RerankProvider, RetrievalMethod, RetryPolicy, TestEmbedder, TestEmbedderConfig,
};
use serde_json::{json, Value};

type Handler = dyn Fn(&str, &Value) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server answering one request per connection.
struct MockSidecar {
    url: String,
    requests: Arc<Mutex<Vec<(String, Value)>>>,
}

impl MockSidecar {
    fn start(handler: impl Fn(&str, &Value) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        let handler: Arc<Handler> = Arc::new(handler);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (log, handler) = (log.clone(), handler.clone());
                thread::spawn(move || serve(stream, &log, &*handler));
            }
        });
        MockSidecar { url, requests }
    }

    fn paths(&self) -> Vec<String> {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .map(|(p, _)| p.clone())
            .collect()
    }
}

fn serve(stream: TcpStream, log: &Mutex<Vec<(String, Value)>>, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    let body: Value = if body.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&body).unwrap()
    };
    log.lock().unwrap().push((path.clone(), body.clone()));
    let (status, payload) = handler(&path, &body);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
}

fn info() -> String {
    json!({
        "models": {"embed": "tiny-embed", "rerank": "tiny-rerank", "generate": "tiny-llm"},
        "dim": TestEmbedderConfig::default().dim,
        "max_tokens": 8192,
        "max_concurrency": 2
    })
    .to_string()
}

fn connect(url: &str) -> Result<SidecarClient, Error> {
    let retry = RetryPolicy {
        retries: 2,
        base_delay: Duration::from_millis(5),
    };
    SidecarClient::connect(url, Duration::from_secs(5), retry)
}

/// Serves the test embedder, the overlap reranker and the mock LLM over the
/// wire, wrapping every embedding in special tokens.
fn faithful(path: &str, body: &Value) -> (u16, String) {
    let embedder = TestEmbedder::new(Default::default()).unwrap();
    let tok = LexicalTokenizer::default();
    match path {
        "/v1/info" => (200, info()),
        "/v1/embed" => {
            let results: Vec<Value> = body["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| {
                    let t = t.as_str().unwrap();
                    let m = embedder.embed_text(t);
                    let n = t.chars().count();
                    let mut tokens = vec![json!({"start": 0, "end": 0, "special": true})];
                    let mut vectors = vec![vec![7.0f32; m.dim]];
                    for (i, &(s, e)) in m.tokens.iter().enumerate() {
                        tokens.push(json!({"start": s, "end": e}));
                        vectors.push(m.row(i).to_vec());
                    }
                    tokens.push(json!({"start": n, "end": n, "special": true}));
                    vectors.push(vec![7.0; m.dim]);
                    json!({"dim": m.dim, "tokens": tokens, "vectors": vectors, "truncated": m.truncated})
                })
                .collect();
            (200, json!({ "results": results }).to_string())
        }
        "/v1/rerank" => {
            let q = body["query"].as_str().unwrap();
            let scores: Vec<f64> = body["documents"]
                .as_array()
                .unwrap()
                .iter()
                .map(|d| common::overlap(&tok, q, d.as_str().unwrap()))
                .collect();
            (200, json!({ "scores": scores }).to_string())
        }
        "/v1/generate" => (200, json!({"text": "A generated line."}).to_string()),
        _ => (404, "{}".into()),
    }
}

#[test]
fn info_is_fetched_on_connect() {
    let server = MockSidecar::start(faithful);
    let client = connect(&server.url).unwrap();
    assert_eq!(client.info().dim, TestEmbedderConfig::default().dim);
    assert_eq!(client.info().name, "sidecar:tiny-embed");
    assert_eq!(client.info().max_concurrency, 2);
    assert_eq!(RerankProvider::name(&client), "tiny-rerank");
    assert_eq!(LlmProvider::name(&client), "tiny-llm");
    assert_eq!(server.paths(), ["/v1/info"]);
}

#[test]
fn embed_drops_special_tokens() {
    let server = MockSidecar::start(faithful);
    let client = connect(&server.url).unwrap();
    let got = client
        .embed_tokens_batch(&["solar power plant", "tea"])
        .unwrap();
    let local = TestEmbedder::new(Default::default()).unwrap();
    assert_eq!(got[0], local.embed_text("solar power plant"));
    assert_eq!(got[1], local.embed_text("tea"));
    let (_, body) = server.requests.lock().unwrap()[1].clone();
    assert_eq!(
        body,
        json!({"texts": ["solar power plant", "tea"], "mode": "tokens"})
    );
}

#[test]
fn rerank_and_generate_round_trip() {
    let server = MockSidecar::start(faithful);
    let client = connect(&server.url).unwrap();
    let scores = client.score("solar power", &["solar", "tea"]).unwrap();
    assert_eq!(scores, [0.5, 0.0]);
    assert_eq!(
        client.generate("Say something.", 12).unwrap(),
        "A generated line."
    );
    let requests = server.requests.lock().unwrap();
    assert_eq!(
        requests[1].1,
        json!({"query": "solar power", "documents": ["solar", "tea"]})
    );
    assert_eq!(
        requests[2].1,
        json!({"prompt": "Say something.", "max_tokens": 12})
    );
}

#[test]
fn busy_service_is_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let seen = calls.clone();
    let server = MockSidecar::start(move |path, body| {
        if path == "/v1/generate" && seen.fetch_add(1, Ordering::SeqCst) < 2 {
            return (503, "busy".into());
        }
        faithful(path, body)
    });
    let client = connect(&server.url).unwrap();
    assert_eq!(client.generate("x", 4).unwrap(), "A generated line.");
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_errors_surface_after_retries() {
    let server = MockSidecar::start(|path, body| match path {
        "/v1/rerank" => (503, "busy".into()),
        "/v1/generate" => (400, "bad prompt".into()),
        _ => faithful(path, body),
    });
    let client = connect(&server.url).unwrap();
    let err = client.score("q", &["p"]).unwrap_err();
    assert!(matches!(err, ProviderError::Status { status: 503, .. }));
    assert_eq!(
        server.paths().iter().filter(|p| *p == "/v1/rerank").count(),
        3
    );

    let err = client.generate("x", 4).unwrap_err();
    assert!(
        matches!(err, ProviderError::Status { status: 400, ref body, .. } if body == "bad prompt")
    );
    assert_eq!(
        server
            .paths()
            .iter()
            .filter(|p| *p == "/v1/generate")
            .count(),
        1
    );
}

#[test]
fn unreachable_service_fails_at_connect() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let err = connect(&format!("http://127.0.0.1:{port}")).err().unwrap();
    assert!(
        matches!(err, Error::Provider(ProviderError::Transport { .. })),
        "{err}"
    );
}

#[test]
fn malformed_payloads_are_protocol_errors() {
    let server = MockSidecar::start(|path, body| match path {
        "/v1/embed" => (
            200,
            json!({"results": [{"dim": 2, "tokens": [{"start": 0, "end": 1}], "vectors": []}]})
                .to_string(),
        ),
        "/v1/generate" => (200, "not json".into()),
        _ => faithful(path, body),
    });
    let client = connect(&server.url).unwrap();
    assert!(matches!(
        client.embed_tokens_batch(&["a"]),
        Err(ProviderError::Protocol { .. })
    ));
    assert!(matches!(
        client.generate("x", 1),
        Err(ProviderError::Protocol { .. })
    ));
}

#[test]
fn zero_dimension_info_is_rejected() {
    let server = MockSidecar::start(|_, _| {
        (
            200,
            json!({"models": {}, "dim": 0, "max_tokens": 10}).to_string(),
        )
    });
    assert!(connect(&server.url).is_err());
}

#[test]
fn pipeline_over_the_wire_matches_in_process_providers() {
    let server = MockSidecar::start(faithful);
    for method in [
        RetrievalMethod::Traditional,
        RetrievalMethod::RankFusionRerank,
    ] {
        let local = ExperimentConfig {
            retrieval_method: method,
            ..common::mini_config()
        };
        let mut remote = local.clone();
        remote.providers.kind = ProviderKind::Sidecar;
        remote.providers.endpoint = Some(server.url.clone());

        let a = Session::open(
            &local,
            Providers::from_config(&local.providers, local.tokenizer).unwrap(),
        )
        .unwrap()
        .run(&local)
        .unwrap();
        let b = Session::open(
            &remote,
            Providers::from_config(&remote.providers, remote.tokenizer).unwrap(),
        )
        .unwrap()
        .run(&remote)
        .unwrap();
        assert_eq!(a.report.metrics, b.report.metrics, "{method}");
        assert_eq!(a.rankings, b.rankings, "{method}");
        assert_eq!(b.manifest.providers.embedder, "sidecar:tiny-embed");
    }
}
