//! Retrieval: score the input against every corpus key and hand back the
//! top-k (key, value) pairs as in-context examples.
//!
//! Retrievers implement [`Retriever`] and are constructed by name through
//! [`RetrieverRegistry`]. Built-in kinds: `bm25`, `dense`, `selector`, `none`.

pub mod bm25;
pub mod dense;
pub mod embedding;
mod tokenize;

pub use bm25::{Bm25Params, Bm25Retriever, LexicalIndex};
pub use dense::{DenseIndex, DenseRetriever, Similarity};
pub use embedding::{
    embed_all, EmbedOptions, EmbeddingProvider, HashEmbedding, ProviderRegistry, ProviderSpec,
    StaticVectors,
};
pub use tokenize::tokenize;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{Corpus, CorpusKind};
use crate::error::{Error, Result};
use embedding::params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Sort by (score desc, id asc), keep the first `k`, and assign ranks.
pub fn rank<'a>(scored: impl IntoIterator<Item = (&'a str, f64)>, k: usize) -> Vec<ScoredDoc> {
    let mut all: Vec<(&str, f64)> = scored.into_iter().collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    all.truncate(k);
    all.into_iter()
        .enumerate()
        .map(|(i, (id, score))| ScoredDoc {
            id: id.to_string(),
            score,
            rank: i + 1,
        })
        .collect()
}

pub trait Retriever: Send + Sync {
    fn kind(&self) -> &str;

    fn search(&self, query: &str, k: usize) -> Result<Vec<ScoredDoc>>;
}

/// Retrieval switched off; always returns nothing.
#[derive(Debug, Default)]
pub struct NoRetriever;

impl Retriever for NoRetriever {
    fn kind(&self) -> &str {
        "none"
    }

    fn search(&self, _: &str, _: usize) -> Result<Vec<ScoredDoc>> {
        Ok(Vec::new())
    }
}

/// A retrieved in-context example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub key: String,
    pub value: Option<String>,
}

/// A corpus paired with the retriever built over it.
pub struct Retrieval {
    corpus: Arc<Corpus>,
    retriever: Box<dyn Retriever>,
    by_id: HashMap<String, usize>,
}

impl Retrieval {
    pub fn new(corpus: Arc<Corpus>, retriever: Box<dyn Retriever>) -> Self {
        let by_id = corpus
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        Retrieval {
            corpus,
            retriever,
            by_id,
        }
    }

    pub fn disabled(corpus: Arc<Corpus>) -> Self {
        Self::new(corpus, Box::new(NoRetriever))
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn retriever(&self) -> &dyn Retriever {
        self.retriever.as_ref()
    }

    /// Top-k examples for an input key. Empty when the corpus kind is
    /// `None`; values are absent for unlabeled corpora.
    pub fn examples(&self, key: &str, k: usize) -> Result<Vec<Example>> {
        if self.corpus.kind == CorpusKind::None || k == 0 {
            return Ok(Vec::new());
        }
        let hits = self.retriever.search(key, k)?;
        hits.into_iter()
            .map(|h| {
                let i = *self.by_id.get(&h.id).ok_or_else(|| {
                    Error::InvalidCorpus(format!("retriever returned unknown id `{}`", h.id))
                })?;
                let e = &self.corpus.entries[i];
                Ok(Example {
                    id: e.id.clone(),
                    key: e.key.clone(),
                    value: e.response().map(str::to_string),
                })
            })
            .collect()
    }
}

/// Retriever declaration as it appears in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverSpec {
    pub name: String,
    pub kind: String,
    #[serde(flatten)]
    pub params: Map<String, Value>,
}

impl RetrieverSpec {
    pub fn new(name: &str, kind: &str, params: Value) -> Self {
        RetrieverSpec {
            name: name.to_string(),
            kind: kind.to_string(),
            params: match params {
                Value::Object(m) => m,
                _ => Map::new(),
            },
        }
    }

    pub fn is_none(&self) -> bool {
        self.kind == "none"
    }
}

/// Shared inputs for building retrievers.
#[derive(Clone)]
pub struct BuildContext {
    pub providers: ProviderRegistry,
    /// Relative paths in params resolve against this directory.
    pub base_dir: PathBuf,
    pub embed: EmbedOptions,
}

impl Default for BuildContext {
    fn default() -> Self {
        BuildContext {
            providers: ProviderRegistry::builtin(),
            base_dir: PathBuf::from("."),
            embed: EmbedOptions::default(),
        }
    }
}

pub type RetrieverFactory = fn(&Map<String, Value>, &Corpus, &BuildContext) -> Result<Box<dyn Retriever>>;

/// Parameter check run at plan time, before any corpus exists.
pub type RetrieverValidator = fn(&Map<String, Value>, &Path) -> Result<()>;

#[derive(Clone)]
struct Entry {
    build: RetrieverFactory,
    validate: RetrieverValidator,
}

#[derive(Clone)]
pub struct RetrieverRegistry {
    entries: BTreeMap<String, Entry>,
}

impl Default for RetrieverRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Bm25Spec {
    #[serde(default = "k1_default")]
    k1: f64,
    #[serde(default = "b_default")]
    b: f64,
}

fn k1_default() -> f64 {
    Bm25Params::default().k1
}

fn b_default() -> f64 {
    Bm25Params::default().b
}

fn bm25_validate(p: &Map<String, Value>, _: &Path) -> Result<()> {
    let s: Bm25Spec = params("bm25 retriever", p)?;
    if !(s.k1 >= 0.0 && (0.0..=1.0).contains(&s.b)) {
        return Err(Error::Config(format!("bm25: bad parameters k1={} b={}", s.k1, s.b)));
    }
    Ok(())
}

fn bm25_factory(p: &Map<String, Value>, c: &Corpus, _: &BuildContext) -> Result<Box<dyn Retriever>> {
    let s: Bm25Spec = params("bm25 retriever", p)?;
    Ok(Box::new(Bm25Retriever {
        index: LexicalIndex::build(c, Bm25Params { k1: s.k1, b: s.b })?,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseSpec {
    provider: ProviderSpec,
    #[serde(default)]
    similarity: Similarity,
}

fn dense_validate(p: &Map<String, Value>, _: &Path) -> Result<()> {
    params::<DenseSpec>("dense retriever", p).map(|_| ())
}

fn dense_factory(p: &Map<String, Value>, c: &Corpus, ctx: &BuildContext) -> Result<Box<dyn Retriever>> {
    let s: DenseSpec = params("dense retriever", p)?;
    let provider = ctx.providers.build(&s.provider, &ctx.base_dir)?;
    let index = DenseIndex::build(c, provider.as_ref(), s.similarity, &ctx.embed)?;
    Ok(Box::new(DenseRetriever { index, provider }))
}

fn none_validate(_: &Map<String, Value>, _: &Path) -> Result<()> {
    Ok(())
}

fn none_factory(_: &Map<String, Value>, _: &Corpus, _: &BuildContext) -> Result<Box<dyn Retriever>> {
    Ok(Box::new(NoRetriever))
}

impl RetrieverRegistry {
    pub fn empty() -> Self {
        RetrieverRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("bm25", bm25_factory, bm25_validate);
        r.register("dense", dense_factory, dense_validate);
        r.register(
            "selector",
            crate::select::selector_factory,
            crate::select::selector_validate,
        );
        r.register("none", none_factory, none_validate);
        r
    }

    pub fn register(&mut self, kind: &str, build: RetrieverFactory, validate: RetrieverValidator) {
        self.entries
            .insert(kind.to_string(), Entry { build, validate });
    }

    pub fn kinds(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    fn entry(&self, kind: &str) -> Result<&Entry> {
        self.entries.get(kind).ok_or_else(|| Error::Unknown {
            registry: "retriever",
            name: kind.to_string(),
        })
    }

    pub fn validate(&self, spec: &RetrieverSpec, base: &Path) -> Result<()> {
        (self.entry(&spec.kind)?.validate)(&spec.params, base)
    }

    pub fn build(&self, spec: &RetrieverSpec, corpus: &Corpus, ctx: &BuildContext) -> Result<Box<dyn Retriever>> {
        (self.entry(&spec.kind)?.build)(&spec.params, corpus, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Instance, TaskKind};
    use crate::perturb::strip_labels;
    use serde_json::json;

    fn fixture() -> Arc<Corpus> {
        let entries = [
            ("1", "aspirin reduces fever quickly", "True"),
            ("2", "the patient slept well", "False"),
            ("3", "tacrolimus caused renal toxicity", "True"),
        ]
        .iter()
        .map(|(i, k, v)| Instance::new(*i, TaskKind::TextClassification, *k).with_value(*v))
        .collect();
        Arc::new(Corpus::from_instances("fx", TaskKind::TextClassification, entries).unwrap())
    }

    #[test]
    fn rank_orders_by_score_then_id() {
        let r = rank([("b", 1.0), ("a", 1.0), ("c", 2.0)], 3);
        let ids: Vec<&str> = r.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(r[2].rank, 3);
    }

    #[test]
    fn self_retrieval_under_both_kinds() {
        let reg = RetrieverRegistry::builtin();
        let ctx = BuildContext::default();
        let c = fixture();
        for spec in [
            RetrieverSpec::new("b", "bm25", json!({})),
            RetrieverSpec::new("d", "dense", json!({"provider": {"kind": "hash", "dim": 32}})),
        ] {
            let r = Retrieval::new(c.clone(), reg.build(&spec, &c, &ctx).unwrap());
            for e in &c.entries {
                let ex = r.examples(&e.key, 1).unwrap();
                assert_eq!(ex[0].id, e.id, "{}", spec.kind);
                assert_eq!(ex[0].value, e.value);
            }
        }
    }

    #[test]
    fn none_kind_returns_nothing() {
        let mut c = (*fixture()).clone();
        c.kind = CorpusKind::None;
        let c = Arc::new(c);
        let reg = RetrieverRegistry::builtin();
        let r = Retrieval::new(
            c.clone(),
            reg.build(&RetrieverSpec::new("b", "bm25", json!({})), &c, &BuildContext::default())
                .unwrap(),
        );
        assert!(r.examples("aspirin", 3).unwrap().is_empty());
    }

    #[test]
    fn unlabeled_examples_have_no_value() {
        let c = Arc::new(strip_labels(&fixture()).unwrap());
        let reg = RetrieverRegistry::builtin();
        let r = Retrieval::new(
            c.clone(),
            reg.build(&RetrieverSpec::new("b", "bm25", json!({})), &c, &BuildContext::default())
                .unwrap(),
        );
        let ex = r.examples("aspirin fever", 2).unwrap();
        assert!(!ex.is_empty());
        assert!(ex.iter().all(|e| e.value.is_none()));
    }

    #[test]
    fn unknown_kind() {
        let reg = RetrieverRegistry::builtin();
        assert!(reg
            .validate(&RetrieverSpec::new("x", "ann", json!({})), Path::new("."))
            .is_err());
        assert!(reg
            .validate(&RetrieverSpec::new("x", "bm25", json!({"k1": 1.0, "b": 2.0})), Path::new("."))
            .is_err());
    }
}
