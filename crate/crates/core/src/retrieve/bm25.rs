//! Okapi BM25 over corpus keys.
//!
//! ```text
//! score(q, d) = Σ_{t ∈ unique(q)} idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·|d| / avgdl))
//! idf(t)      = ln(1 + (N − n_t + 0.5) / (n_t + 0.5))
//! ```
//!
//! Query terms are deduplicated in first-occurrence order. The IDF is always
//! positive, so a document scores above zero iff it shares a term with the
//! query; zero-score documents are never returned.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{rank, tokenize, Retriever, ScoredDoc};
use crate::corpus::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalIndex {
    pub params: Bm25Params,
    pub doc_ids: Vec<String>,
    pub doc_lens: Vec<u32>,
    pub avgdl: f64,
    pub postings: BTreeMap<String, Vec<Posting>>,
}

pub fn idf(n_docs: usize, doc_freq: usize) -> f64 {
    let n = n_docs as f64;
    let df = doc_freq as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

impl LexicalIndex {
    pub fn build(c: &Corpus, params: Bm25Params) -> Result<Self> {
        if c.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "cannot index empty corpus `{}`",
                c.name
            )));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lens = Vec::with_capacity(c.len());
        for (doc, e) in c.entries.iter().enumerate() {
            let tokens = tokenize(&e.key);
            doc_lens.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, tf) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf,
                });
            }
        }
        let total: u64 = doc_lens.iter().map(|&l| l as u64).sum();
        Ok(LexicalIndex {
            params,
            doc_ids: c.entries.iter().map(|e| e.id.clone()).collect(),
            avgdl: total as f64 / doc_lens.len() as f64,
            doc_lens,
            postings,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn query(&self, query: &str, k: usize) -> Vec<ScoredDoc> {
        let mut terms: Vec<String> = Vec::new();
        for t in tokenize(query) {
            if !terms.contains(&t) {
                terms.push(t);
            }
        }
        let Bm25Params { k1, b } = self.params;
        let n = self.doc_count();
        let mut acc = vec![0.0f64; n];
        let mut hit = vec![false; n];
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let w = idf(n, list.len());
            for p in list {
                let d = p.doc as usize;
                let tf = p.tf as f64;
                let norm = if self.avgdl > 0.0 {
                    1.0 - b + b * self.doc_lens[d] as f64 / self.avgdl
                } else {
                    1.0
                };
                acc[d] += w * (tf * (k1 + 1.0)) / (tf + k1 * norm);
                hit[d] = true;
            }
        }
        let scored = (0..n)
            .filter(|&d| hit[d] && acc[d] > 0.0)
            .map(|d| (self.doc_ids[d].as_str(), acc[d]));
        rank(scored, k)
    }
}

#[derive(Debug)]
pub struct Bm25Retriever {
    pub index: LexicalIndex,
}

impl Retriever for Bm25Retriever {
    fn kind(&self) -> &str {
        "bm25"
    }

    fn search(&self, query: &str, k: usize) -> Result<Vec<ScoredDoc>> {
        Ok(self.index.query(query, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Instance, TaskKind};

    fn corpus(keys: &[&str]) -> Corpus {
        let entries = keys
            .iter()
            .enumerate()
            .map(|(i, k)| Instance::new(format!("d{}", i + 1), TaskKind::TextClassification, *k).with_value("x"))
            .collect();
        Corpus::from_instances("c", TaskKind::TextClassification, entries).unwrap()
    }

    #[test]
    fn two_doc_stats() {
        let ix = LexicalIndex::build(&corpus(&["a b", "a c"]), Bm25Params::default()).unwrap();
        assert_eq!(ix.doc_count(), 2);
        assert_eq!(ix.avgdl, 2.0);
        assert_eq!(ix.postings["a"].len(), 2);
        assert_eq!(ix.postings["c"].len(), 1);
    }

    #[test]
    fn rare_term_ranks_its_doc_first() {
        let ix = LexicalIndex::build(&corpus(&["a b", "a c"]), Bm25Params::default()).unwrap();
        let hits = ix.query("c", 1);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "d2");
        // hand evaluation: idf = ln(1 + 1.5/1.5) = ln 2, tf part = 2.2/2.2 = 1
        assert!((hits[0].score - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn no_overlap_is_empty() {
        let ix = LexicalIndex::build(&corpus(&["a b", "a c"]), Bm25Params::default()).unwrap();
        assert!(ix.query("zzz", 3).is_empty());
    }

    #[test]
    fn k_larger_than_corpus() {
        let ix = LexicalIndex::build(&corpus(&["a b", "a c", "d"]), Bm25Params::default()).unwrap();
        let hits = ix.query("a b", 10);
        assert_eq!(hits.len(), 2);
        assert!(hits[0].score >= hits[1].score);
        assert_eq!(hits[0].rank, 1);
        assert_eq!(hits[1].rank, 2);
    }

    #[test]
    fn ties_break_by_id() {
        let ix = LexicalIndex::build(&corpus(&["a x", "a y"]), Bm25Params::default()).unwrap();
        let hits = ix.query("a", 2);
        assert_eq!(hits[0].score, hits[1].score);
        assert_eq!(hits[0].id, "d1");
    }

    #[test]
    fn rebuild_is_identical() {
        let c = corpus(&["a b", "a c", "b b c"]);
        let a = serde_json::to_string(&LexicalIndex::build(&c, Bm25Params::default()).unwrap()).unwrap();
        let b = serde_json::to_string(&LexicalIndex::build(&c, Bm25Params::default()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_rejected() {
        let c = Corpus::from_instances("e", TaskKind::TextClassification, vec![]).unwrap();
        assert!(LexicalIndex::build(&c, Bm25Params::default()).is_err());
    }

    #[test]
    fn avgdl_matches_lengths() {
        let ix = LexicalIndex::build(&corpus(&["a b c", "a", "b c d e f"]), Bm25Params::default()).unwrap();
        let total: u32 = ix.doc_lens.iter().sum();
        assert!((total as f64 / ix.doc_count() as f64 - ix.avgdl).abs() < 1e-9);
    }
}
