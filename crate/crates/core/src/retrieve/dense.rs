//! Exact full-scan dense retrieval.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::embedding::{embed_all, normalize_in_place, EmbedOptions, EmbeddingProvider};
use super::{rank, Retriever, ScoredDoc};
use crate::corpus::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    /// Rows and queries are unit-normalized, score is their dot product.
    #[default]
    Cosine,
    Dot,
    /// Score is the negated Euclidean distance on raw vectors.
    Euclidean,
}

impl Similarity {
    pub fn score(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Cosine | Similarity::Dot => dot(a, b),
            Similarity::Euclidean => -euclidean(a, b),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseIndex {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub dim: usize,
    pub similarity: Similarity,
    /// Provider calls issued while building (zero on a warm cache).
    #[serde(skip)]
    pub provider_calls: usize,
}

impl DenseIndex {
    pub fn build(
        c: &Corpus,
        provider: &dyn EmbeddingProvider,
        similarity: Similarity,
        opts: &EmbedOptions,
    ) -> Result<Self> {
        let texts: Vec<String> = c.entries.iter().map(|e| e.key.clone()).collect();
        let ids: Vec<String> = c.entries.iter().map(|e| e.id.clone()).collect();
        let embedded = embed_all(provider, &texts, &ids, opts)?;
        Self::from_rows(ids, embedded.vectors, similarity).map(|mut ix| {
            ix.provider_calls = embedded.provider_calls;
            if ix.dim == 0 {
                ix.dim = provider.dim().unwrap_or(0);
            }
            ix
        })
    }

    pub fn from_rows(ids: Vec<String>, mut rows: Vec<Vec<f64>>, similarity: Similarity) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        for r in &rows {
            if r.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: r.len(),
                });
            }
        }
        if similarity == Similarity::Cosine {
            rows.iter_mut().for_each(|r| normalize_in_place(r));
        }
        Ok(DenseIndex {
            ids,
            rows,
            dim,
            similarity,
            provider_calls: 0,
        })
    }

    pub fn query_vector(&self, query: &[f64], k: usize) -> Result<Vec<ScoredDoc>> {
        if !self.rows.is_empty() && query.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let mut q = query.to_vec();
        if self.similarity == Similarity::Cosine {
            normalize_in_place(&mut q);
        }
        let scored = self
            .ids
            .iter()
            .zip(&self.rows)
            .map(|(id, row)| (id.as_str(), self.similarity.score(&q, row)));
        Ok(rank(scored, k))
    }

    pub fn query(&self, query: &str, provider: &dyn EmbeddingProvider, k: usize) -> Result<Vec<ScoredDoc>> {
        let v = provider
            .embed(&[query.to_string()])?
            .pop()
            .ok_or_else(|| Error::Provider {
                provider: provider.id().to_string(),
                instance: query.to_string(),
                msg: "empty response".into(),
            })?;
        self.query_vector(&v, k)
    }
}

pub struct DenseRetriever {
    pub index: DenseIndex,
    pub provider: Arc<dyn EmbeddingProvider>,
}

impl Retriever for DenseRetriever {
    fn kind(&self) -> &str {
        "dense"
    }

    fn search(&self, query: &str, k: usize) -> Result<Vec<ScoredDoc>> {
        self.index.query(query, self.provider.as_ref(), k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Instance, TaskKind};
    use crate::retrieve::embedding::{l2_norm, HashEmbedding, StaticVectors};

    fn corpus(keys: &[&str]) -> Corpus {
        let entries = keys
            .iter()
            .enumerate()
            .map(|(i, k)| Instance::new(format!("{i}"), TaskKind::TextClassification, *k).with_value("v"))
            .collect();
        Corpus::from_instances("c", TaskKind::TextClassification, entries).unwrap()
    }

    #[test]
    fn shape_and_unit_rows() {
        let ix = DenseIndex::build(
            &corpus(&["a", "b", "c"]),
            &HashEmbedding::new(4),
            Similarity::Cosine,
            &EmbedOptions::default(),
        )
        .unwrap();
        assert_eq!(ix.rows.len(), 3);
        assert_eq!(ix.dim, 4);
        for r in &ix.rows {
            assert!((l2_norm(r) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn self_similarity_ranks_first() {
        let p = HashEmbedding::new(32);
        let c = corpus(&["alpha", "beta", "gamma", "delta"]);
        let ix = DenseIndex::build(&c, &p, Similarity::Cosine, &EmbedOptions::default()).unwrap();
        let hits = ix.query("gamma", &p, 1).unwrap();
        assert_eq!(hits[0].id, "2");
        assert!((hits[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_vectors() {
        let p = StaticVectors::from_texts("o", [("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0])]);
        let c = corpus(&["x", "y"]);
        let ix = DenseIndex::build(&c, &p, Similarity::Cosine, &EmbedOptions::default()).unwrap();
        let hits = ix.query("x", &p, 2).unwrap();
        let scores: Vec<f64> = hits.iter().map(|h| h.score).collect();
        assert_eq!(scores, vec![1.0, 0.0]);
    }

    #[test]
    fn ragged_rows_rejected() {
        let err = DenseIndex::from_rows(
            vec!["a".into(), "b".into()],
            vec![vec![1.0], vec![1.0, 2.0]],
            Similarity::Dot,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn query_dimension_checked() {
        let ix = DenseIndex::from_rows(vec!["a".into()], vec![vec![1.0, 0.0]], Similarity::Dot).unwrap();
        assert!(ix.query_vector(&[1.0], 1).is_err());
    }
}
