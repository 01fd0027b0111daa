use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{EmbeddingCache, EmbeddingVector};
use crate::corpus::{tokenize, TokenPolicy};
use crate::error::{Error, Result};
use crate::http::{self, JsonClient};
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingProviderConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub batch_size: usize,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub api_key_env: String,
    /// Upper bound on in-flight requests.
    pub concurrency: usize,
    pub backoff_base_ms: u64,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000".into(),
            model_name: "bert-base-uncased".into(),
            batch_size: 64,
            timeout_secs: 60.0,
            max_retries: 3,
            api_key_env: "OPENAI_API_KEY".into(),
            concurrency: 4,
            backoff_base_ms: 500,
        }
    }
}

impl EmbeddingProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("embedding batch_size must be at least 1"));
        }
        if self.concurrency == 0 {
            return Err(Error::invalid("embedding concurrency must be at least 1"));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::invalid("embedding timeout must be positive"));
        }
        Ok(())
    }
}

/// Something that turns a batch of texts into raw vectors, one per text.
pub trait EmbeddingBackend: Send + Sync {
    fn model_name(&self) -> &str;
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Client for OpenAI-compatible `/v1/embeddings` servers.
pub struct HttpEmbedder {
    url: String,
    model: String,
    client: JsonClient,
}

impl HttpEmbedder {
    pub fn new(cfg: &EmbeddingProviderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            url: http::join(&cfg.endpoint_url, "v1/embeddings"),
            model: cfg.model_name.clone(),
            client: JsonClient::new(
                Duration::from_secs_f64(cfg.timeout_secs),
                &cfg.api_key_env,
                cfg.max_retries,
                Duration::from_millis(cfg.backoff_base_ms),
            )?,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl EmbeddingBackend for HttpEmbedder {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({ "model": self.model, "input": texts });
        let value = self.client.post(&self.url, &body)?;
        let resp: EmbeddingResponse = serde_json::from_value(value)
            .map_err(|e| Error::Protocol(format!("{}: bad embeddings response: {e}", self.url)))?;
        let mut data = resp.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}

/// Offline embedder: a bag of per-token pseudo-random vectors plus a smaller
/// whole-text component, all seeded from SHA-256. Texts sharing words land
/// near each other; distinct texts never collide.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    model: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim: dim.max(1),
            model: format!("hash-bow-{}", dim.max(1)),
        }
    }

    fn seeded(&self, salt: u8, s: &str) -> impl Iterator<Item = f64> {
        let mut h = Sha256::new();
        h.update([salt]);
        h.update(s.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(move |_| rng.random_range(-1.0..1.0))
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for token in tokenize(text, &TokenPolicy::default()) {
            for (o, x) in out.iter_mut().zip(self.seeded(0, &token)) {
                *o += x;
            }
        }
        for (o, x) in out.iter_mut().zip(self.seeded(1, text)) {
            *o += 0.5 * x;
        }
        out
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Embeds `texts` in input order, consulting and updating `cache`.
///
/// Uncached texts are deduplicated, chunked by `batch_size`, and sent with at
/// most `concurrency` requests in flight. Returns the vectors and the number
/// of backend calls made.
pub fn embed_batch(
    texts: &[String],
    cfg: &EmbeddingProviderConfig,
    backend: &dyn EmbeddingBackend,
    cache: &mut EmbeddingCache,
) -> Result<(Vec<EmbeddingVector>, usize)> {
    cfg.validate()?;
    let model = backend.model_name().to_string();
    let mut missing: Vec<&String> = Vec::new();
    let mut queued = std::collections::HashSet::new();
    for t in texts {
        if cache.get(&model, t).is_none() && queued.insert(t.as_str()) {
            missing.push(t);
        }
    }

    let chunks: Vec<Vec<String>> = missing
        .chunks(cfg.batch_size)
        .map(|c| c.iter().map(|s| (*s).clone()).collect())
        .collect();
    let results: Mutex<Vec<Option<Result<Vec<Vec<f64>>>>>> =
        Mutex::new((0..chunks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = cfg.concurrency.min(chunks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= chunks.len() {
                    break;
                }
                let r = backend.embed_raw(&chunks[i]);
                results.lock().expect("poisoned")[i] = Some(r);
            });
        }
    });

    let mut dim = texts
        .iter()
        .find_map(|t| cache.get(&model, t))
        .map(EmbeddingVector::dim);
    for (chunk, result) in chunks.iter().zip(results.into_inner().expect("poisoned")) {
        let raw = result.expect("every chunk is processed")?;
        if raw.len() != chunk.len() {
            return Err(Error::Protocol(format!(
                "provider returned {} vectors for {} texts",
                raw.len(),
                chunk.len()
            )));
        }
        for (text, values) in chunk.iter().zip(raw) {
            let v = EmbeddingVector::new(values)
                .map_err(|e| Error::Protocol(format!("bad vector from provider: {e}")))?;
            match dim {
                None => dim = Some(v.dim()),
                Some(d) if d != v.dim() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        actual: v.dim(),
                    })
                }
                _ => {}
            }
            cache.insert(&model, text, v);
        }
    }

    let out: Vec<EmbeddingVector> = texts
        .iter()
        .map(|t| cache.get(&model, t).cloned().expect("embedded above"))
        .collect();
    if let Some(first) = out.first() {
        if let Some(bad) = out.iter().find(|v| v.dim() != first.dim()) {
            return Err(Error::DimensionMismatch {
                expected: first.dim(),
                actual: bad.dim(),
            });
        }
    }
    Ok((out, chunks.len()))
}

/// Anything that can embed texts in order.
pub trait TextEmbedder {
    fn embed_texts(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

/// A backend paired with its cache and batching settings.
pub struct Embedder {
    cfg: EmbeddingProviderConfig,
    backend: Arc<dyn EmbeddingBackend>,
    cache: EmbeddingCache,
    calls: usize,
}

impl Embedder {
    pub fn new(
        cfg: EmbeddingProviderConfig,
        backend: Arc<dyn EmbeddingBackend>,
        cache: EmbeddingCache,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            backend,
            cache,
            calls: 0,
        })
    }

    pub fn http(cfg: EmbeddingProviderConfig, cache: EmbeddingCache) -> Result<Self> {
        let backend = Arc::new(HttpEmbedder::new(&cfg)?);
        Self::new(cfg, backend, cache)
    }

    /// Number of backend requests issued so far.
    pub fn backend_calls(&self) -> usize {
        self.calls
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn persist(&mut self) -> Result<()> {
        self.cache.flush()
    }
}

impl TextEmbedder for Embedder {
    fn embed_texts(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let (vectors, calls) = embed_batch(texts, &self.cfg, self.backend.as_ref(), &mut self.cache)?;
        self.calls += calls;
        Ok(vectors)
    }
}

/// SHA-256 hex digest of a text, used to key precomputed vectors.
pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_hash: Option<String>,
    pub vector: EmbeddingVector,
}

/// Vectors computed elsewhere, looked up by sample id or text hash.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedVectors {
    by_id: HashMap<String, EmbeddingVector>,
    by_hash: HashMap<String, EmbeddingVector>,
}

impl PrecomputedVectors {
    pub fn load(path: &Path) -> Result<Self> {
        let mut out = Self::default();
        let mut dim = None;
        for (line, rec) in jsonl::read::<VectorRecord>(path)? {
            if *dim.get_or_insert(rec.vector.dim()) != rec.vector.dim() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("vector dimension {} differs from earlier lines", rec.vector.dim()),
                });
            }
            if rec.id.is_none() && rec.text_hash.is_none() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: "record needs `id` or `text_hash`".into(),
                });
            }
            if let Some(id) = rec.id {
                out.by_id.insert(id, rec.vector.clone());
            }
            if let Some(h) = rec.text_hash {
                out.by_hash.insert(h, rec.vector);
            }
        }
        Ok(out)
    }

    pub fn lookup(&self, id: &str, text: &str) -> Option<&EmbeddingVector> {
        self.by_id
            .get(id)
            .or_else(|| self.by_hash.get(&text_hash(text)))
    }
}

impl TextEmbedder for PrecomputedVectors {
    fn embed_texts(&mut self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .map(|t| {
                self.by_hash
                    .get(&text_hash(t))
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("no precomputed vector for text {t:?}")))
            })
            .collect()
    }
}

/// Writes `{id, text_hash, vector}` lines.
pub fn write_vectors(path: &Path, rows: &[(String, String, EmbeddingVector)]) -> Result<()> {
    let records: Vec<VectorRecord> = rows
        .iter()
        .map(|(id, text, v)| VectorRecord {
            id: Some(id.clone()),
            text_hash: Some(text_hash(text)),
            vector: v.clone(),
        })
        .collect();
    jsonl::write(path, &records)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Counting {
        inner: HashEmbedder,
        calls: AtomicUsize,
        drop_last: bool,
    }

    impl Counting {
        fn new(drop_last: bool) -> Self {
            Self {
                inner: HashEmbedder::new(8),
                calls: AtomicUsize::new(0),
                drop_last,
            }
        }
    }

    impl EmbeddingBackend for Counting {
        fn model_name(&self) -> &str {
            "counting"
        }

        fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut out = self.inner.embed_raw(texts)?;
            if self.drop_last {
                out.pop();
            }
            Ok(out)
        }
    }

    fn texts(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn cfg(batch: usize) -> EmbeddingProviderConfig {
        EmbeddingProviderConfig {
            batch_size: batch,
            concurrency: 3,
            ..Default::default()
        }
    }

    #[test]
    fn cached_texts_make_no_calls() {
        let backend = Counting::new(false);
        let mut cache = EmbeddingCache::in_memory();
        let t = texts(&["a b", "c d"]);
        let (first, calls) = embed_batch(&t, &cfg(8), &backend, &mut cache).unwrap();
        assert_eq!(calls, 1);
        let (second, calls) = embed_batch(&t, &cfg(8), &backend, &mut cache).unwrap();
        assert_eq!(calls, 0);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        assert_eq!(first, second);
    }

    #[test]
    fn wrong_count_is_protocol_error() {
        let backend = Counting::new(true);
        let mut cache = EmbeddingCache::in_memory();
        let err = embed_batch(&texts(&["x", "y"]), &cfg(8), &backend, &mut cache).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn order_preserved_across_concurrent_chunks() {
        let backend = Counting::new(false);
        let mut cache = EmbeddingCache::in_memory();
        let t: Vec<String> = (0..23).map(|i| format!("text number {i}")).chain(["text number 3".to_string()]).collect();
        let (out, calls) = embed_batch(&t, &cfg(4), &backend, &mut cache).unwrap();
        assert_eq!(calls, 6);
        for (text, v) in t.iter().zip(&out) {
            assert_eq!(v.as_slice(), backend.inner.embed_one(text).as_slice());
        }
        assert_eq!(out[3], out[23]);
    }

    #[test]
    fn zero_batch_size_rejected() {
        let backend = Counting::new(false);
        let mut cache = EmbeddingCache::in_memory();
        assert!(embed_batch(&texts(&["a"]), &cfg(0), &backend, &mut cache).is_err());
    }

    #[test]
    fn hash_embedder_is_deterministic_and_word_sensitive() {
        let e = HashEmbedder::new(16);
        assert_eq!(e.embed_one("the cat sat"), e.embed_one("the cat sat"));
        assert_ne!(e.embed_one("the cat sat"), e.embed_one("The cat sat"));
        let d = |a: &str, b: &str| {
            let (a, b) = (e.embed_one(a), e.embed_one(b));
            a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        assert!(d("the cat sat on the mat", "the cat sat on a mat") < d("the cat sat on the mat", "quantum flux ahead"));
    }

    #[test]
    fn precomputed_lookup_by_id_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        let v1 = EmbeddingVector::new(vec![1.0, 2.0]).unwrap();
        write_vectors(&path, &[("a".into(), "hello".into(), v1.clone())]).unwrap();
        let mut pre = PrecomputedVectors::load(&path).unwrap();
        assert_eq!(pre.lookup("a", "zzz"), Some(&v1));
        assert_eq!(pre.lookup("zzz", "hello"), Some(&v1));
        assert!(pre.lookup("b", "bye").is_none());
        assert_eq!(pre.embed_texts(&texts(&["hello"])).unwrap(), vec![v1]);
        assert!(pre.embed_texts(&texts(&["bye"])).is_err());
    }
}
