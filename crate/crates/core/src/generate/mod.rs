//! Prompt assembly, LLM backends, the generation cache and the
//! retrieve → prompt → generate → parse pipeline.

mod backend;
mod pipeline;
mod prompt;

pub use backend::{
    Backend, BackendFactory, BackendRegistry, BackendSpec, HttpChat, HttpChatConfig, MockEcho, MockFixed,
};
pub use pipeline::{
    parse_negativity, run_pipeline, ExampleTransform, GenerationRecord, NegativityClaim, NegativityMapping,
    NegativityMode, Pipeline, PipelineOptions, Timing,
};
pub(crate) use prompt::line as prompt_line;
pub use prompt::{assemble_prompt, first_example_response, PromptSpec, NEGATIVITY_INSTRUCTION};

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::Result;
use crate::util::{sha256_hex, write_atomic};

/// Content-addressed store of completions:
/// `<dir>/generations/<sha256(backend id, params, prompt)>.json`.
#[derive(Debug, Clone)]
pub struct GenerationCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CachedCompletion {
    backend: String,
    text: String,
}

impl GenerationCache {
    pub fn new(root: &Path) -> Self {
        GenerationCache {
            dir: root.join("generations"),
        }
    }

    pub fn key(backend: &dyn Backend, prompt: &str) -> String {
        sha256_hex(json!([backend.id(), backend.params(), prompt]).to_string())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let bytes = std::fs::read(self.path(key)).ok()?;
        serde_json::from_slice::<CachedCompletion>(&bytes).ok().map(|c| c.text)
    }

    pub fn put(&self, key: &str, backend: &str, text: &str) -> Result<()> {
        let body = serde_json::to_vec(&CachedCompletion {
            backend: backend.to_string(),
            text: text.to_string(),
        })?;
        write_atomic(&self.path(key), &body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    pub cache_hit: bool,
    pub latency_ms: u64,
}

/// A backend plus its cache. Counts the calls that actually reached the
/// backend.
pub struct Generator {
    backend: Arc<dyn Backend>,
    cache: Option<GenerationCache>,
    calls: AtomicUsize,
}

impl Generator {
    pub fn new(backend: Arc<dyn Backend>, cache_dir: Option<&Path>) -> Self {
        Generator {
            backend,
            cache: cache_dir.map(GenerationCache::new),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn uncached(backend: Arc<dyn Backend>) -> Self {
        Self::new(backend, None)
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn generate(&self, prompt: &str) -> Result<Generation> {
        let start = Instant::now();
        let key = self.cache.as_ref().map(|_| GenerationCache::key(self.backend.as_ref(), prompt));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(text) = cache.get(key) {
                return Ok(Generation {
                    text,
                    cache_hit: true,
                    latency_ms: start.elapsed().as_millis() as u64,
                });
            }
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = self.backend.complete(prompt)?;
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            cache.put(key, self.backend.id(), &text)?;
        }
        Ok(Generation {
            text,
            cache_hit: false,
            latency_ms: start.elapsed().as_millis() as u64,
        })
    }
}

/// One-shot completion without a cache.
pub fn generate(backend: &Arc<dyn Backend>, prompt: &str) -> Result<String> {
    Generator::uncached(backend.clone()).generate(prompt).map(|g| g.text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warm_cache_skips_backend() {
        let dir = tempfile::tempdir().unwrap();
        let g = Generator::new(Arc::new(MockFixed::new("x")), Some(dir.path()));
        let a = g.generate("p").unwrap();
        let b = g.generate("p").unwrap();
        assert!(!a.cache_hit && b.cache_hit);
        assert_eq!(a.text, b.text);
        assert_eq!(g.backend_calls(), 1);
        let g2 = Generator::new(Arc::new(MockFixed::new("x")), Some(dir.path()));
        g2.generate("p").unwrap();
        assert_eq!(g2.backend_calls(), 0);
    }

    #[test]
    fn cache_key_depends_on_backend() {
        let a = GenerationCache::key(&MockFixed::new("x"), "p");
        let b = GenerationCache::key(&MockFixed::new("y"), "p");
        let c = GenerationCache::key(&MockEcho, "p");
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
