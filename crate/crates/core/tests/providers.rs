//! HTTP provider clients against an in-process OpenAI-compatible server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use paraug_core::augment::{
    generate_candidates, judge_validity, ChatBackend, ChatRequest, DecodeMode, GenerationProviderConfig,
    HttpChatClient, Validity, PARAPHRASE_PROMPT,
};
use paraug_core::corpus::{write_dataset, Dataset, TextSample};
use paraug_core::embedding::{Embedder, EmbeddingCache, EmbeddingProviderConfig, TextEmbedder};
use paraug_core::pipeline::{self, PipelineConfig, Providers};
use paraug_core::{Error, ErrorClass};
use serde_json::{json, Value};

type Handler = dyn Fn(&str, &Value) -> (u16, Value) + Send + Sync;

/// Minimal HTTP/1.1 server; one request per connection.
struct MockServer {
    url: String,
    requests: Arc<Mutex<Vec<(String, Value)>>>,
}

impl MockServer {
    fn start(handler: impl Fn(&str, &Value) -> (u16, Value) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let handler: Arc<Handler> = Arc::new(handler);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let log = Arc::clone(&log);
                let handler = Arc::clone(&handler);
                std::thread::spawn(move || serve(stream, &log, handler.as_ref()));
            }
        });
        Self { url, requests }
    }

    fn paths(&self) -> Vec<String> {
        self.requests.lock().unwrap().iter().map(|(p, _)| p.clone()).collect()
    }

    fn bodies(&self) -> Vec<Value> {
        self.requests.lock().unwrap().iter().map(|(_, b)| b.clone()).collect()
    }
}

fn serve(stream: TcpStream, log: &Mutex<Vec<(String, Value)>>, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    reader.read_line(&mut request_line).unwrap();
    let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        if line.trim().is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    log.lock().unwrap().push((path.clone(), body.clone()));
    let (status, reply) = handler(&path, &body);
    let payload = reply.to_string();
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
}

/// Deterministic vector for a text: length, vowel count, word count, 1.
fn toy_vector(text: &str) -> Vec<f64> {
    let vowels = text.chars().filter(|c| "aeiou".contains(*c)).count();
    vec![
        text.len() as f64,
        vowels as f64,
        text.split_whitespace().count() as f64,
        1.0,
    ]
}

fn embeddings_reply(body: &Value) -> Value {
    let inputs = body["input"].as_array().unwrap();
    // reversed on the wire to check that clients reorder by index
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .rev()
        .map(|(i, t)| json!({"index": i, "embedding": toy_vector(t.as_str().unwrap())}))
        .collect();
    json!({"data": data})
}

fn chat_reply(body: &Value) -> Value {
    let system = body["messages"][0]["content"].as_str().unwrap();
    let user = body["messages"][1]["content"].as_str().unwrap();
    let n = body["n"].as_u64().unwrap_or(1) as usize;
    let texts: Vec<String> = if system == PARAPHRASE_PROMPT {
        (0..n).map(|k| format!("{user} {}", "really ".repeat(k + 1).trim_end())).collect()
    } else {
        vec!["VALID keeps the meaning".to_string()]
    };
    let choices: Vec<Value> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| json!({"index": i, "message": {"role": "assistant", "content": t}}))
        .collect();
    json!({"choices": choices})
}

fn openai_like(path: &str, body: &Value) -> (u16, Value) {
    match path {
        "/v1/embeddings" => (200, embeddings_reply(body)),
        "/v1/chat/completions" => (200, chat_reply(body)),
        _ => (404, json!({"error": "not found"})),
    }
}

fn embed_cfg(url: &str) -> EmbeddingProviderConfig {
    EmbeddingProviderConfig {
        endpoint_url: url.to_string(),
        model_name: "toy".into(),
        batch_size: 2,
        concurrency: 2,
        max_retries: 2,
        backoff_base_ms: 1,
        ..Default::default()
    }
}

fn gen_cfg(url: &str) -> GenerationProviderConfig {
    GenerationProviderConfig {
        endpoint_url: url.to_string(),
        model_name: "para".into(),
        max_retries: 1,
        backoff_base_ms: 1,
        ..Default::default()
    }
}

fn texts(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[test]
fn embedder_batches_orders_and_caches() {
    let server = MockServer::start(openai_like);
    let dir = tempfile::tempdir().unwrap();
    let cache_path = dir.path().join("cache.jsonl");
    let input = texts(&["alpha", "beta gamma", "delta", "epsilon zeta eta", "theta", "alpha"]);

    let mut e = Embedder::http(embed_cfg(&server.url), EmbeddingCache::open(&cache_path).unwrap()).unwrap();
    let out = e.embed_texts(&input).unwrap();
    for (t, v) in input.iter().zip(&out) {
        assert_eq!(v.as_slice(), toy_vector(t).as_slice());
    }
    // five distinct texts in batches of two
    assert_eq!(e.backend_calls(), 3);
    e.persist().unwrap();

    let mut again = Embedder::http(embed_cfg(&server.url), EmbeddingCache::open(&cache_path).unwrap()).unwrap();
    assert_eq!(again.embed_texts(&input).unwrap(), out);
    assert_eq!(again.backend_calls(), 0);
    assert!(server.paths().iter().all(|p| p == "/v1/embeddings"));
    assert!(server.bodies().iter().all(|b| b["model"] == "toy"));
}

#[test]
fn embedder_retries_rate_limits() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&hits);
    let server = MockServer::start(move |path, body| {
        if counter.fetch_add(1, Ordering::SeqCst) == 0 {
            (429, json!({"error": "slow down"}))
        } else {
            openai_like(path, body)
        }
    });
    let mut e = Embedder::http(embed_cfg(&server.url), EmbeddingCache::in_memory()).unwrap();
    let out = e.embed_texts(&texts(&["one"])).unwrap();
    assert_eq!(out[0].as_slice(), toy_vector("one").as_slice());
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start(|_, _| (400, json!({"error": "bad"})));
    let mut e = Embedder::http(embed_cfg(&server.url), EmbeddingCache::in_memory()).unwrap();
    let err = e.embed_texts(&texts(&["one"])).unwrap_err();
    assert!(matches!(err, Error::Provider(_)), "{err}");
    assert_eq!(err.class(), ErrorClass::ProviderOrIo);
    assert_eq!(server.paths().len(), 1);
}

#[test]
fn wrong_vector_count_is_a_protocol_error() {
    let server = MockServer::start(|_, _| (200, json!({"data": [{"index": 0, "embedding": [1.0]}]})));
    let mut e = Embedder::http(embed_cfg(&server.url), EmbeddingCache::in_memory()).unwrap();
    let err = e.embed_texts(&texts(&["one", "two"])).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn chat_client_sends_k_and_decode_flags() {
    let server = MockServer::start(openai_like);
    let beam = HttpChatClient::new(&gen_cfg(&server.url)).unwrap();
    let out = generate_candidates("the cat sat", &gen_cfg(&server.url), &beam).unwrap();
    assert_eq!(out.len(), 5);
    assert_eq!(out[0], "the cat sat really");
    let body = &server.bodies()[0];
    assert_eq!(body["n"], 5);
    assert_eq!(body["use_beam_search"], true);
    assert_eq!(body["messages"][0]["content"], PARAPHRASE_PROMPT);
    assert_eq!(body["messages"][1]["content"], "the cat sat");

    let sample_cfg = GenerationProviderConfig {
        decode_mode: DecodeMode::Sample,
        temperature: 0.7,
        ..gen_cfg(&server.url)
    };
    let sampler = HttpChatClient::new(&sample_cfg).unwrap();
    sampler
        .complete(&ChatRequest {
            system: PARAPHRASE_PROMPT.into(),
            user: "x".into(),
            n: 2,
            decode_mode: DecodeMode::Sample,
            temperature: 0.7,
        })
        .unwrap();
    let body = &server.bodies()[1];
    assert_eq!(body["temperature"], 0.7);
    assert!(body.get("use_beam_search").is_none());
}

#[test]
fn single_choice_servers_get_k_requests() {
    let server = MockServer::start(openai_like);
    let cfg = GenerationProviderConfig {
        multi_choice: false,
        num_candidates: 3,
        ..gen_cfg(&server.url)
    };
    let client = HttpChatClient::new(&cfg).unwrap();
    let out = generate_candidates("hello", &cfg, &client).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(server.paths().len(), 3);
    assert!(server.bodies().iter().all(|b| b["n"] == 1));
}

#[test]
fn judge_over_http() {
    let server = MockServer::start(openai_like);
    let client = HttpChatClient::new(&gen_cfg(&server.url)).unwrap();
    let v = judge_validity("a", "b", "pos", &gen_cfg(&server.url), &client).unwrap();
    assert_eq!(v.validity, Validity::Valid);
    assert_eq!(v.rationale, "keeps the meaning");
}

fn write_fixture(dir: &std::path::Path, n: usize) -> std::path::PathBuf {
    let path = dir.join("data.jsonl");
    let samples: Vec<TextSample> = (0..n)
        .map(|i| TextSample::new(format!("s{i}"), format!("an example sentence number {i}"), ["x", "y"][i % 2]))
        .collect();
    write_dataset(&Dataset::new("data", samples).unwrap(), &path).unwrap();
    path
}

#[test]
fn pipeline_against_http_providers() {
    let server = MockServer::start(openai_like);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        dataset: write_fixture(dir.path(), 9),
        dry_run: true, // no dynamics file: synthesize them
        embedding: embed_cfg(&server.url),
        generation: gen_cfg(&server.url),
        judge: Some(gen_cfg(&server.url)),
        out_dir: dir.path().join("out"),
        ..Default::default()
    };
    let mut providers = Providers::http(&cfg).unwrap();
    let out = pipeline::run_with_providers(&cfg, &mut providers).unwrap();
    assert_eq!(out.augmented.len(), 9);
    let calls = &out.manifest.provider_calls;
    assert_eq!(calls.generation, 3);
    assert_eq!(calls.judge, 3);
    assert!(calls.embedding > 0);
    assert_eq!(out.manifest.validity.as_ref().unwrap().rate, 1.0);
    // the longest candidate is farthest under the toy embedding
    let paraphrases: Vec<&TextSample> = out.augmented.samples().iter().filter(|s| s.id.contains("#p")).collect();
    assert_eq!(paraphrases.len(), 3);
    assert!(paraphrases.iter().all(|s| s.text.ends_with("really really really really really")));
}

#[test]
fn provider_failure_quarantines_partial_outputs() {
    let server = MockServer::start(|path, body| match path {
        "/v1/chat/completions" => (200, json!({"choices": [{"index": 0, "message": {"content": "only one"}}]})),
        _ => openai_like(path, body),
    });
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = PipelineConfig {
        dataset: write_fixture(dir.path(), 6),
        dry_run: true,
        embedding: embed_cfg(&server.url),
        generation: gen_cfg(&server.url),
        out_dir: out_dir.clone(),
        ..Default::default()
    };
    let mut providers = Providers::http(&cfg).unwrap();
    let err = pipeline::run_with_providers(&cfg, &mut providers).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage: "generate", .. }), "{err}");
    assert_eq!(err.class(), ErrorClass::ProviderOrIo);

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join(pipeline::MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert_eq!(manifest["failure"]["stage"], "generate");
    assert!(out_dir.join(pipeline::QUARANTINE_DIR).join(pipeline::SPLIT_FILE).exists());
    assert!(!out_dir.join(pipeline::AUGMENTED_FILE).exists());
}
