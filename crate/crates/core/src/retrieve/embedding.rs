//! Embedding providers and the content-addressed embedding cache.
//!
//! Wire contract of the HTTP provider:
//!
//! ```text
//! POST {"model": "...", "texts": ["...", ...]}  ->  {"vectors": [[f64, ...], ...]}
//! ```
//!
//! A static vectors file is a JSON object mapping the SHA-256 hex digest of
//! each text to its vector.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::util::{sha256_hex, write_atomic};

pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn id(&self) -> &str;

    /// Fixed output dimension, when known up front.
    fn dim(&self) -> Option<usize>;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

pub fn text_hash(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalize_in_place(v: &mut [f64]) {
    let n = l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Deterministic offline provider: each text maps to a pseudo-random unit
/// vector seeded from the SHA-256 of `salt || text`.
#[derive(Debug, Clone)]
pub struct HashEmbedding {
    id: String,
    dim: usize,
    salt: String,
}

impl HashEmbedding {
    pub fn new(dim: usize) -> Self {
        Self::with_salt(dim, "")
    }

    pub fn with_salt(dim: usize, salt: &str) -> Self {
        HashEmbedding {
            id: format!("hash-{dim}{}{salt}", if salt.is_empty() { "" } else { "-" }),
            dim,
            salt: salt.to_string(),
        }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let digest = sha256_hex(format!("{}\u{0}{text}", self.salt));
        let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        let mut rng = SeededRng::new(seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.normal()).collect();
        normalize_in_place(&mut v);
        v
    }
}

impl EmbeddingProvider for HashEmbedding {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Provider backed by a fixed table of vectors keyed by text hash.
#[derive(Debug, Clone)]
pub struct StaticVectors {
    id: String,
    dim: Option<usize>,
    table: HashMap<String, Vec<f64>>,
}

impl StaticVectors {
    pub fn from_texts<'a>(id: &str, pairs: impl IntoIterator<Item = (&'a str, Vec<f64>)>) -> Self {
        let table: HashMap<String, Vec<f64>> =
            pairs.into_iter().map(|(t, v)| (text_hash(t), v)).collect();
        let dim = table.values().next().map(Vec::len);
        StaticVectors {
            id: id.to_string(),
            dim,
            table,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: HashMap<String, Vec<f64>> = serde_json::from_str(&text)?;
        let dim = table.values().next().map(Vec::len);
        if let Some(d) = dim {
            if let Some(bad) = table.values().find(|v| v.len() != d) {
                return Err(Error::Dimension {
                    expected: d,
                    actual: bad.len(),
                });
            }
        }
        Ok(StaticVectors {
            id: format!("static-{}", &sha256_hex(text.as_bytes())[..12]),
            dim,
            table,
        })
    }
}

impl EmbeddingProvider for StaticVectors {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> Option<usize> {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.table.get(&text_hash(t)).cloned().ok_or_else(|| Error::Provider {
                    provider: self.id.clone(),
                    instance: t.clone(),
                    msg: "text not present in vectors file".into(),
                })
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

pub struct HttpEmbedding {
    id: String,
    endpoint: String,
    model: String,
    dim: Option<usize>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedding {
    pub fn new(endpoint: &str, model: &str, dim: Option<usize>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpEmbedding {
            id: format!("http-{model}"),
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            dim,
            client,
        })
    }
}

impl EmbeddingProvider for HttpEmbedding {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> Option<usize> {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let fail = |msg: String| Error::Provider {
            provider: self.id.clone(),
            instance: texts.first().cloned().unwrap_or_default(),
            msg,
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&EmbedRequest {
                model: &self.model,
                texts,
            })
            .send()
            .map_err(|e| fail(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(format!("HTTP {}", resp.status())));
        }
        let body: EmbedResponse = resp.json().map_err(|e| fail(e.to_string()))?;
        if body.vectors.len() != texts.len() {
            return Err(fail(format!(
                "{} vectors for {} texts",
                body.vectors.len(),
                texts.len()
            )));
        }
        Ok(body.vectors)
    }
}

#[derive(Debug, Clone)]
pub struct EmbedOptions {
    pub cache_dir: Option<PathBuf>,
    pub batch_size: usize,
    pub max_in_flight: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        EmbedOptions {
            cache_dir: None,
            batch_size: 32,
            max_in_flight: 4,
        }
    }
}

/// Content-addressed vector cache: `<dir>/embeddings/<provider>/<text hash>.json`.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(root: &Path, provider_id: &str) -> Self {
        EmbeddingCache {
            dir: root.join("embeddings").join(&sha256_hex(provider_id)[..16]),
        }
    }

    fn path(&self, text: &str) -> PathBuf {
        self.dir.join(format!("{}.json", text_hash(text)))
    }

    pub fn get(&self, text: &str) -> Option<Vec<f64>> {
        let bytes = std::fs::read(self.path(text)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn put(&self, text: &str, v: &[f64]) -> Result<()> {
        write_atomic(&self.path(text), &serde_json::to_vec(v)?)
    }
}

/// Result of [`embed_all`]: vectors aligned with the input plus the number
/// of provider calls actually issued.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub vectors: Vec<Vec<f64>>,
    pub provider_calls: usize,
}

/// Embed `texts` (labelled by `ids` for error reporting), consulting the
/// cache first and batching misses across at most `max_in_flight` threads.
pub fn embed_all(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    ids: &[String],
    opts: &EmbedOptions,
) -> Result<Embedded> {
    assert_eq!(texts.len(), ids.len());
    let cache = opts
        .cache_dir
        .as_ref()
        .map(|d| EmbeddingCache::new(d, provider.id()));
    let mut vectors: Vec<Option<Vec<f64>>> = texts
        .iter()
        .map(|t| cache.as_ref().and_then(|c| c.get(t)))
        .collect();
    let missing: Vec<usize> = (0..texts.len()).filter(|&i| vectors[i].is_none()).collect();
    let batches: Vec<&[usize]> = missing.chunks(opts.batch_size.max(1)).collect();
    let calls = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let workers = opts.max_in_flight.max(1).min(batches.len().max(1));

    let results: Vec<Result<Vec<(usize, Vec<f64>)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| -> Result<Vec<(usize, Vec<f64>)>> {
                    let mut out = Vec::new();
                    loop {
                        let b = next.fetch_add(1, Ordering::SeqCst);
                        let Some(batch) = batches.get(b) else {
                            return Ok(out);
                        };
                        let chunk: Vec<String> = batch.iter().map(|&i| texts[i].clone()).collect();
                        calls.fetch_add(1, Ordering::SeqCst);
                        let vs = provider.embed(&chunk).map_err(|e| match e {
                            Error::Provider { provider, msg, .. } => Error::Provider {
                                provider,
                                instance: ids[batch[0]].clone(),
                                msg,
                            },
                            other => Error::Provider {
                                provider: provider.id().to_string(),
                                instance: ids[batch[0]].clone(),
                                msg: other.to_string(),
                            },
                        })?;
                        for (&i, v) in batch.iter().zip(vs) {
                            if let Some(c) = &cache {
                                c.put(&texts[i], &v)?;
                            }
                            out.push((i, v));
                        }
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
    });
    for r in results {
        for (i, v) in r? {
            vectors[i] = Some(v);
        }
    }

    let vectors: Vec<Vec<f64>> = vectors.into_iter().map(|v| v.expect("filled")).collect();
    let expected = provider.dim().or_else(|| vectors.first().map(Vec::len));
    if let Some(d) = expected {
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != d {
                return Err(Error::Provider {
                    provider: provider.id().to_string(),
                    instance: ids[i].clone(),
                    msg: Error::Dimension {
                        expected: d,
                        actual: v.len(),
                    }
                    .to_string(),
                });
            }
        }
    }
    Ok(Embedded {
        vectors,
        provider_calls: calls.into_inner(),
    })
}

/// Embedding provider declaration as it appears in configs:
/// `{kind = "hash", dim = 64}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub kind: String,
    #[serde(flatten)]
    pub params: Map<String, Value>,
}

impl ProviderSpec {
    pub fn new(kind: &str, params: Value) -> Self {
        ProviderSpec {
            kind: kind.to_string(),
            params: match params {
                Value::Object(m) => m,
                _ => Map::new(),
            },
        }
    }
}

pub type ProviderFactory = fn(&Map<String, Value>, &Path) -> Result<Arc<dyn EmbeddingProvider>>;

/// Embedding providers registered by kind name.
#[derive(Clone)]
pub struct ProviderRegistry {
    factories: BTreeMap<String, ProviderFactory>,
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

pub(crate) fn params<T: serde::de::DeserializeOwned>(
    what: &str,
    params: &Map<String, Value>,
) -> Result<T> {
    serde_json::from_value(Value::Object(params.clone()))
        .map_err(|e| Error::Config(format!("{what}: {e}")))
}

pub(crate) fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn hash_factory(p: &Map<String, Value>, _: &Path) -> Result<Arc<dyn EmbeddingProvider>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct P {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        salt: String,
    }
    fn default_dim() -> usize {
        64
    }
    let p: P = params("hash provider", p)?;
    if p.dim == 0 {
        return Err(Error::Config("hash provider: dim must be positive".into()));
    }
    Ok(Arc::new(HashEmbedding::with_salt(p.dim, &p.salt)))
}

fn static_factory(p: &Map<String, Value>, base: &Path) -> Result<Arc<dyn EmbeddingProvider>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct P {
        path: String,
    }
    let p: P = params("static provider", p)?;
    Ok(Arc::new(StaticVectors::load(&resolve(base, &p.path))?))
}

fn http_factory(p: &Map<String, Value>, _: &Path) -> Result<Arc<dyn EmbeddingProvider>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct P {
        endpoint: String,
        model: String,
        dim: Option<usize>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    }
    fn default_timeout() -> u64 {
        60
    }
    let p: P = params("http provider", p)?;
    Ok(Arc::new(HttpEmbedding::new(
        &p.endpoint,
        &p.model,
        p.dim,
        Duration::from_secs(p.timeout_secs),
    )?))
}

impl ProviderRegistry {
    pub fn empty() -> Self {
        ProviderRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("hash", hash_factory);
        r.register("static", static_factory);
        r.register("http", http_factory);
        r
    }

    pub fn register(&mut self, kind: &str, factory: ProviderFactory) -> Option<ProviderFactory> {
        self.factories.insert(kind.to_string(), factory)
    }

    pub fn kinds(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, spec: &ProviderSpec, base: &Path) -> Result<Arc<dyn EmbeddingProvider>> {
        let f = self.factories.get(&spec.kind).ok_or_else(|| Error::Unknown {
            registry: "embedding provider",
            name: spec.kind.clone(),
        })?;
        f(&spec.params, base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_vectors_are_unit_and_stable() {
        let p = HashEmbedding::new(16);
        let a = p.vector("hello");
        assert_eq!(a.len(), 16);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-12);
        assert_eq!(a, p.vector("hello"));
        assert_ne!(a, p.vector("hello!"));
    }

    #[test]
    fn static_vectors_lookup() {
        let p = StaticVectors::from_texts("s", [("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
        assert_eq!(p.embed(&["b".into()]).unwrap(), vec![vec![0.0, 1.0]]);
        assert!(matches!(p.embed(&["zz".into()]), Err(Error::Provider { .. })));
    }

    #[test]
    fn registry_builds_hash() {
        let r = ProviderRegistry::builtin();
        let p = r
            .build(&ProviderSpec::new("hash", serde_json::json!({"dim": 8})), Path::new("."))
            .unwrap();
        assert_eq!(p.dim(), Some(8));
        assert!(r
            .build(&ProviderSpec::new("nope", Value::Null), Path::new("."))
            .is_err());
    }

    #[test]
    fn warm_cache_skips_provider() {
        let dir = tempfile::tempdir().unwrap();
        let p = HashEmbedding::new(4);
        let texts: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let opts = EmbedOptions {
            cache_dir: Some(dir.path().to_path_buf()),
            batch_size: 3,
            max_in_flight: 2,
        };
        let cold = embed_all(&p, &texts, &texts, &opts).unwrap();
        assert_eq!(cold.provider_calls, 4);
        let warm = embed_all(&p, &texts, &texts, &opts).unwrap();
        assert_eq!(warm.provider_calls, 0);
        assert_eq!(cold.vectors, warm.vectors);
    }

    #[test]
    fn dimension_mismatch_names_instance() {
        let p = StaticVectors::from_texts("s", [("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0, 2.0])]);
        let p = StaticVectors { dim: None, ..p };
        let err = embed_all(
            &p,
            &["a".into(), "b".into()],
            &["i1".into(), "i2".into()],
            &EmbedOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Provider { instance, .. } if instance == "i2"));
    }
}
