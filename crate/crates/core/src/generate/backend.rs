//! LLM backends.
//!
//! HTTP wire contract:
//!
//! ```text
//! POST {"model": "...", "prompt": "...", "temperature": 0.0, "max_tokens": 256}  ->  {"text": "..."}
//! ```
//!
//! An API key, when configured, is read from the named environment variable
//! and sent as a bearer token.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::thread::sleep;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::prompt::first_example_response;
use crate::error::{Error, Result};
use crate::retrieve::embedding::params;

pub trait Backend: Send + Sync {
    /// Stable identifier; part of every generation cache key.
    fn id(&self) -> &str;

    /// Decoding parameters that influence the output (cache key material).
    fn params(&self) -> Value {
        Value::Null
    }

    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Returns the response of the first example in the prompt, or "".
#[derive(Debug, Default)]
pub struct MockEcho;

impl Backend for MockEcho {
    fn id(&self) -> &str {
        "mock-echo"
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        Ok(first_example_response(prompt).unwrap_or_default().to_string())
    }
}

/// Always returns the same text.
#[derive(Debug)]
pub struct MockFixed {
    id: String,
    text: String,
}

impl MockFixed {
    pub fn new(text: &str) -> Self {
        MockFixed {
            id: format!("mock-fixed:{text}"),
            text: text.to_string(),
        }
    }
}

impl Backend for MockFixed {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, _: &str) -> Result<String> {
        Ok(self.text.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpChatConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_max_tokens() -> u32 {
    256
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_timeout() -> u64 {
    120
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    text: String,
}

pub struct HttpChat {
    id: String,
    config: HttpChatConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl HttpChat {
    pub fn new(config: HttpChatConfig) -> Result<Self> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpChat {
            id: format!("http:{}@{}", config.model, config.endpoint),
            config,
            api_key,
            client,
        })
    }

    fn attempt(&self, prompt: &str) -> std::result::Result<String, Attempt> {
        let mut req = self.client.post(&self.config.endpoint).json(&ChatRequest {
            model: &self.config.model,
            prompt,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(format!("HTTP {status}")));
        }
        let body = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        serde_json::from_str::<ChatResponse>(&body)
            .map(|r| r.text)
            .map_err(|e| Attempt::Fatal(format!("malformed response: {e}")))
    }
}

impl Backend for HttpChat {
    fn id(&self) -> &str {
        &self.id
    }

    fn params(&self) -> Value {
        json!({
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        })
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let mut attempt = 0;
        loop {
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(msg)) => {
                    return Err(Error::Backend {
                        backend: self.id.clone(),
                        msg,
                    })
                }
                Err(Attempt::Retry(msg)) if attempt >= self.config.max_retries => {
                    return Err(Error::Backend {
                        backend: self.id.clone(),
                        msg: format!("{msg} (after {} attempts)", attempt + 1),
                    })
                }
                Err(Attempt::Retry(msg)) => {
                    let delay = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("{}: {msg}; retrying in {delay} ms", self.id);
                    sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
            }
        }
    }
}

/// Backend declaration as it appears in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub name: String,
    pub kind: String,
    #[serde(flatten)]
    pub params: Map<String, Value>,
}

impl BackendSpec {
    pub fn new(name: &str, kind: &str, params: Value) -> Self {
        BackendSpec {
            name: name.to_string(),
            kind: kind.to_string(),
            params: match params {
                Value::Object(m) => m,
                _ => Map::new(),
            },
        }
    }
}

pub type BackendFactory = fn(&Map<String, Value>, &Path) -> Result<Arc<dyn Backend>>;

#[derive(Clone)]
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

fn echo_factory(p: &Map<String, Value>, _: &Path) -> Result<Arc<dyn Backend>> {
    if !p.is_empty() {
        return Err(Error::Config("mock-echo takes no parameters".into()));
    }
    Ok(Arc::new(MockEcho))
}

fn fixed_factory(p: &Map<String, Value>, _: &Path) -> Result<Arc<dyn Backend>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct P {
        text: String,
    }
    let p: P = params("mock-fixed backend", p)?;
    Ok(Arc::new(MockFixed::new(&p.text)))
}

fn http_factory(p: &Map<String, Value>, _: &Path) -> Result<Arc<dyn Backend>> {
    let c: HttpChatConfig = params("http backend", p)?;
    Ok(Arc::new(HttpChat::new(c)?))
}

impl BackendRegistry {
    pub fn empty() -> Self {
        BackendRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("mock-echo", echo_factory);
        r.register("mock-fixed", fixed_factory);
        r.register("http", http_factory);
        r.register("oracle", crate::correct::oracle_factory);
        r
    }

    pub fn register(&mut self, kind: &str, factory: BackendFactory) -> Option<BackendFactory> {
        self.factories.insert(kind.to_string(), factory)
    }

    pub fn kinds(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.factories.contains_key(kind)
    }

    pub fn build(&self, spec: &BackendSpec, base: &Path) -> Result<Arc<dyn Backend>> {
        let f = self.factories.get(&spec.kind).ok_or_else(|| Error::Unknown {
            registry: "backend",
            name: spec.kind.clone(),
        })?;
        f(&spec.params, base)
    }
}
