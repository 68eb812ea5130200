//! Triplet-loss example selector.
//!
//! A linear projection `P(x) = W x + b` is trained on top of frozen
//! embeddings with the hinge
//!
//! ```text
//! L(a, p, n) = max(‖P(a) − P(p)‖ − ‖P(a) − P(n)‖ + α, 0)
//! ```
//!
//! so that helpful instances end up closer to the input than unhelpful ones.
//! Corpus instances are then ranked by ascending projected distance.
//!
//! With `u = W(a − p)` and `v = W(a − n)` the gradient of an active hinge is
//!
//! ```text
//! ∂L/∂W = (u/‖u‖)(a − p)ᵀ − (v/‖v‖)(a − n)ᵀ,    ∂L/∂b = 0
//! ```
//!
//! A term whose projected distance is exactly zero contributes nothing, and
//! an inactive hinge (`L = 0`, including the kink) has zero gradient.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{Corpus, Instance};
use crate::error::{Error, Result};
use crate::retrieve::dense::euclidean;
use crate::retrieve::embedding::{embed_all, params, resolve, EmbedOptions, EmbeddingProvider, ProviderSpec};
use crate::retrieve::{rank, BuildContext, Retriever, ScoredDoc};
use crate::rng::SeededRng;

const MAGIC: &[u8; 8] = b"RALSEL01";

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub anchor_id: String,
    pub positive_id: String,
    pub negative_id: String,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl Triplet {
    pub fn from_vectors(anchor: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>) -> Self {
        Triplet {
            anchor_id: String::new(),
            positive_id: String::new(),
            negative_id: String::new(),
            anchor,
            positive,
            negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    pub d_out: usize,
    pub d_in: usize,
    /// Row-major `d_out × d_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub margin: f64,
    pub provider_id: String,
}

impl ProjectionModel {
    pub fn identity(dim: usize, margin: f64) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        ProjectionModel {
            d_out: dim,
            d_in: dim,
            weights,
            bias: vec![0.0; dim],
            margin,
            provider_id: String::new(),
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d_out)
            .map(|r| {
                let row = &self.weights[r * self.d_in..(r + 1) * self.d_in];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[r]
            })
            .collect()
    }

    fn check(&self, t: &Triplet) -> Result<()> {
        for v in [&t.anchor, &t.positive, &t.negative] {
            if v.len() != self.d_in {
                return Err(Error::Dimension {
                    expected: self.d_in,
                    actual: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Hinge value for one triplet in projected space.
    pub fn triplet_loss(&self, t: &Triplet) -> Result<f64> {
        self.check(t)?;
        let a = self.project(&t.anchor);
        let d_pos = euclidean(&a, &self.project(&t.positive));
        let d_neg = euclidean(&a, &self.project(&t.negative));
        Ok((d_pos - d_neg + self.margin).max(0.0))
    }

    /// Loss and gradient with respect to `weights` (bias gradient is zero).
    pub fn loss_and_grad(&self, t: &Triplet) -> Result<(f64, Vec<f64>)> {
        let loss = self.triplet_loss(t)?;
        let mut grad = vec![0.0; self.weights.len()];
        if loss <= 0.0 {
            return Ok((loss, grad));
        }
        let diff = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a - b).collect() };
        let dp = diff(&t.anchor, &t.positive);
        let dn = diff(&t.anchor, &t.negative);
        for (delta, sign) in [(&dp, 1.0), (&dn, -1.0)] {
            // W·delta equals P(a) − P(x); bias cancels.
            let u: Vec<f64> = (0..self.d_out)
                .map(|r| {
                    self.weights[r * self.d_in..(r + 1) * self.d_in]
                        .iter()
                        .zip(delta.iter())
                        .map(|(w, d)| w * d)
                        .sum()
                })
                .collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            for r in 0..self.d_out {
                let coef = sign * u[r] / norm;
                for c in 0..self.d_in {
                    grad[r * self.d_in + c] += coef * delta[c];
                }
            }
        }
        Ok((loss, grad))
    }

    pub fn mean_loss(&self, triplets: &[Triplet]) -> Result<f64> {
        let mut sum = 0.0;
        for t in triplets {
            sum += self.triplet_loss(t)?;
        }
        Ok(sum / triplets.len().max(1) as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * (self.weights.len() + self.bias.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.d_out as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_in as u32).to_le_bytes());
        out.extend_from_slice(&self.margin.to_le_bytes());
        for w in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&(self.provider_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.provider_id.as_bytes());
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("selector model: {m}"));
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32_buf = [0u8; 4];
        let mut f64_buf = [0u8; 8];
        let mut read_u32 = |b: &mut &[u8]| -> Result<usize> {
            b.read_exact(&mut u32_buf).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(u32_buf) as usize)
        };
        let d_out = read_u32(&mut bytes)?;
        let d_in = read_u32(&mut bytes)?;
        let mut read_f64 = |b: &mut &[u8]| -> Result<f64> {
            b.read_exact(&mut f64_buf).map_err(|_| bad("truncated"))?;
            Ok(f64::from_le_bytes(f64_buf))
        };
        let margin = read_f64(&mut bytes)?;
        let weights = (0..d_out * d_in).map(|_| read_f64(&mut bytes)).collect::<Result<Vec<_>>>()?;
        let bias = (0..d_out).map(|_| read_f64(&mut bytes)).collect::<Result<Vec<_>>>()?;
        let len = read_u32(&mut bytes)?;
        if bytes.len() != len {
            return Err(bad("trailing or missing provider id bytes"));
        }
        let provider_id = String::from_utf8(bytes.to_vec()).map_err(|_| bad("provider id not utf-8"))?;
        if !weights.iter().chain(&bias).all(|x| x.is_finite()) || !(margin > 0.0) {
            return Err(bad("non-finite weights or non-positive margin"));
        }
        Ok(ProjectionModel {
            d_out,
            d_in,
            weights,
            bias,
            margin,
            provider_id,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives_per_anchor: usize,
    pub margin: f64,
    pub seed: u64,
    /// Compute per-triplet gradients on the rayon pool; the reduction order
    /// stays fixed so weights are identical to the sequential path.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 32,
            negatives_per_anchor: 4,
            margin: 1.0,
            seed: 0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || self.epochs == 0
            || self.batch_size == 0
            || self.negatives_per_anchor == 0
            || !(self.margin > 0.0)
        {
            return Err(Error::InvalidArgument(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ProjectionModel,
    /// Mean loss before training followed by the mean loss after each epoch.
    pub loss_trace: Vec<f64>,
}

/// Mini-batch gradient descent from the identity projection.
pub fn train(triplets: &[Triplet], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let first = triplets
        .first()
        .ok_or_else(|| Error::InvalidArgument("no triplets to train on".into()))?;
    let mut model = ProjectionModel::identity(first.anchor.len(), config.margin);
    let mut trace = vec![model.mean_loss(triplets)?];
    let mut rng = SeededRng::new(config.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let per: Vec<Result<(f64, Vec<f64>)>> = if config.parallel {
                batch.par_iter().map(|&i| model.loss_and_grad(&triplets[i])).collect()
            } else {
                batch.iter().map(|&i| model.loss_and_grad(&triplets[i])).collect()
            };
            let mut loss = 0.0;
            let mut grad = vec![0.0; model.weights.len()];
            for r in per {
                let (l, g) = r?;
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, step, loss });
            }
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= config.learning_rate * g * scale;
            }
            step += 1;
        }
        let epoch_loss = model.mean_loss(triplets)?;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                loss: epoch_loss,
            });
        }
        log::debug!("epoch {epoch}: mean triplet loss {epoch_loss:.6}");
        trace.push(epoch_loss);
    }
    Ok(TrainOutcome {
        model,
        loss_trace: trace,
    })
}

/// Alternative source for positive texts. The default positive of an
/// instance is its own key.
pub type PositiveHook<'a> = &'a dyn Fn(&Instance) -> String;

pub fn build_triplets(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    negatives_per_anchor: usize,
    seed: u64,
    opts: &EmbedOptions,
) -> Result<Vec<Triplet>> {
    build_triplets_with(corpus, provider, negatives_per_anchor, seed, opts, None)
}

pub fn build_triplets_with(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    negatives_per_anchor: usize,
    seed: u64,
    opts: &EmbedOptions,
    positive: Option<PositiveHook<'_>>,
) -> Result<Vec<Triplet>> {
    let n = corpus.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "triplets need at least 2 instances, `{}` has {n}",
            corpus.name
        )));
    }
    if negatives_per_anchor == 0 {
        return Err(Error::InvalidArgument("negatives_per_anchor must be positive".into()));
    }
    let keys: Vec<String> = corpus.entries.iter().map(|e| e.key.clone()).collect();
    let ids: Vec<String> = corpus.entries.iter().map(|e| e.id.clone()).collect();
    let anchors = embed_all(provider, &keys, &ids, opts)?.vectors;
    let positives = match positive {
        None => anchors.clone(),
        Some(hook) => {
            let texts: Vec<String> = corpus.entries.iter().map(hook).collect();
            embed_all(provider, &texts, &ids, opts)?.vectors
        }
    };

    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(n * negatives_per_anchor);
    for i in 0..n {
        let distinct = negatives_per_anchor.min(n - 1);
        let mut picks: Vec<usize> = rng.sample_indices(n - 1, distinct);
        while picks.len() < negatives_per_anchor {
            picks.push(rng.below((n - 1) as u64) as usize);
        }
        for p in picks {
            let j = if p >= i { p + 1 } else { p };
            out.push(Triplet {
                anchor_id: ids[i].clone(),
                positive_id: ids[i].clone(),
                negative_id: ids[j].clone(),
                anchor: anchors[i].clone(),
                positive: positives[i].clone(),
                negative: anchors[j].clone(),
            });
        }
    }
    Ok(out)
}

/// Ranks corpus instances by ascending distance to the input in projected
/// space. Scores are negated distances so they decrease with rank.
pub struct SelectorRetriever {
    model: ProjectionModel,
    provider: Arc<dyn EmbeddingProvider>,
    ids: Vec<String>,
    projected: Vec<Vec<f64>>,
}

impl SelectorRetriever {
    pub fn build(
        model: ProjectionModel,
        provider: Arc<dyn EmbeddingProvider>,
        corpus: &Corpus,
        opts: &EmbedOptions,
    ) -> Result<Self> {
        let keys: Vec<String> = corpus.entries.iter().map(|e| e.key.clone()).collect();
        let ids: Vec<String> = corpus.entries.iter().map(|e| e.id.clone()).collect();
        let rows = embed_all(provider.as_ref(), &keys, &ids, opts)?.vectors;
        let projected = rows
            .iter()
            .map(|r| {
                if r.len() != model.d_in {
                    Err(Error::Dimension {
                        expected: model.d_in,
                        actual: r.len(),
                    })
                } else {
                    Ok(model.project(r))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SelectorRetriever {
            model,
            provider,
            ids,
            projected,
        })
    }

    pub fn select_vector(&self, query: &[f64], k: usize) -> Result<Vec<ScoredDoc>> {
        if query.len() != self.model.d_in {
            return Err(Error::Dimension {
                expected: self.model.d_in,
                actual: query.len(),
            });
        }
        let q = self.model.project(query);
        let scored = self
            .ids
            .iter()
            .zip(&self.projected)
            .map(|(id, row)| (id.as_str(), -euclidean(&q, row)));
        Ok(rank(scored, k))
    }
}

impl Retriever for SelectorRetriever {
    fn kind(&self) -> &str {
        "selector"
    }

    fn search(&self, query: &str, k: usize) -> Result<Vec<ScoredDoc>> {
        let v = self
            .provider
            .embed(&[query.to_string()])?
            .pop()
            .unwrap_or_default();
        self.select_vector(&v, k)
    }
}

/// Rank `corpus` for `key` with a (trained or identity) projection.
pub fn select_examples(
    model: &ProjectionModel,
    provider: Arc<dyn EmbeddingProvider>,
    key: &str,
    corpus: &Corpus,
    k: usize,
) -> Result<Vec<ScoredDoc>> {
    SelectorRetriever::build(model.clone(), provider, corpus, &EmbedOptions::default())?.search(key, k)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectorSpec {
    model: Option<String>,
    provider: ProviderSpec,
}

pub(crate) fn selector_validate(p: &Map<String, Value>, _: &Path) -> Result<()> {
    let s: SelectorSpec = params("selector retriever", p)?;
    if s.model.is_none() {
        return Err(Error::Config("selector retriever needs a `model` path".into()));
    }
    Ok(())
}

pub(crate) fn selector_factory(
    p: &Map<String, Value>,
    corpus: &Corpus,
    ctx: &BuildContext,
) -> Result<Box<dyn Retriever>> {
    selector_validate(p, &ctx.base_dir)?;
    let s: SelectorSpec = params("selector retriever", p)?;
    let model = ProjectionModel::load(&resolve(&ctx.base_dir, s.model.as_deref().unwrap_or_default()))?;
    let provider = ctx.providers.build(&s.provider, &ctx.base_dir)?;
    if !model.provider_id.is_empty() && model.provider_id != provider.id() {
        return Err(Error::Config(format!(
            "selector model was trained on provider `{}`, config uses `{}`",
            model.provider_id,
            provider.id()
        )));
    }
    Ok(Box::new(SelectorRetriever::build(model, provider, corpus, &ctx.embed)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TaskKind;
    use crate::retrieve::HashEmbedding;

    fn t(a: Vec<f64>, p: Vec<f64>, n: Vec<f64>) -> Triplet {
        Triplet::from_vectors(a, p, n)
    }

    #[test]
    fn satisfied_margin_is_zero() {
        let m = ProjectionModel::identity(2, 1.0);
        let l = m.triplet_loss(&t(vec![0.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0])).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn violated_margin_arithmetic() {
        let m = ProjectionModel::identity(2, 1.0);
        let l = m.triplet_loss(&t(vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0])).unwrap();
        assert_eq!(l, 2.0);
    }

    #[test]
    fn equal_positive_and_negative_gives_margin() {
        let m = ProjectionModel::identity(3, 1.0);
        let l = m
            .triplet_loss(&t(vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]))
            .unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        let m = ProjectionModel::identity(2, 1.0);
        assert!(m.triplet_loss(&t(vec![0.0], vec![0.0, 0.0], vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn inactive_hinges_make_training_a_no_op() {
        let ts = vec![
            t(vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 0.0]),
            t(vec![1.0, 1.0], vec![1.0, 1.1], vec![-4.0, 1.0]),
        ];
        let out = train(&ts, &TrainConfig::default()).unwrap();
        assert_eq!(out.model, ProjectionModel::identity(2, 1.0));
        assert!(out.loss_trace.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn parallel_mode_matches_sequential() {
        let c = corpus(12);
        let p = HashEmbedding::new(8);
        let ts = build_triplets(&c, &p, 2, 4, &EmbedOptions::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let a = train(&ts, &cfg).unwrap();
        let b = train(&ts, &TrainConfig { parallel: true, ..cfg }).unwrap();
        assert_eq!(a.model.weights, b.model.weights);
    }

    #[test]
    fn divergence_is_reported() {
        let ts = vec![t(vec![0.0, 0.0], vec![1e308, 1e308], vec![0.0, 0.0])];
        let err = train(&ts, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    fn corpus(n: usize) -> Corpus {
        let entries = (0..n)
            .map(|i| Instance::new(format!("i{i:02}"), TaskKind::TextClassification, format!("sentence {i}")).with_value("x"))
            .collect();
        Corpus::from_instances("c", TaskKind::TextClassification, entries).unwrap()
    }

    #[test]
    fn triplets_exclude_anchor_and_are_seeded() {
        let p = HashEmbedding::new(4);
        let c = corpus(3);
        let ts = build_triplets(&c, &p, 1, 9, &EmbedOptions::default()).unwrap();
        assert_eq!(ts.len(), 3);
        assert!(ts.iter().all(|t| t.negative_id != t.anchor_id && t.positive_id == t.anchor_id));
        let again = build_triplets(&c, &p, 1, 9, &EmbedOptions::default()).unwrap();
        let negs = |v: &[Triplet]| v.iter().map(|t| t.negative_id.clone()).collect::<Vec<_>>();
        assert_eq!(negs(&ts), negs(&again));
    }

    #[test]
    fn triplet_count() {
        let p = HashEmbedding::new(4);
        let ts = build_triplets(&corpus(10), &p, 2, 1, &EmbedOptions::default()).unwrap();
        assert_eq!(ts.len(), 10 * 2);
        assert!(build_triplets(&corpus(1), &p, 1, 1, &EmbedOptions::default()).is_err());
    }

    #[test]
    fn paraphrase_hook_changes_positive() {
        let p = HashEmbedding::new(4);
        let hook = |e: &Instance| format!("{} (paraphrased)", e.key);
        let ts = build_triplets_with(&corpus(3), &p, 1, 1, &EmbedOptions::default(), Some(&hook)).unwrap();
        assert!(ts.iter().all(|t| t.anchor != t.positive));
    }

    #[test]
    fn model_file_round_trip() {
        let mut m = ProjectionModel::identity(3, 1.0);
        m.weights[1] = 0.25;
        m.bias[2] = -1.5;
        m.provider_id = "hash-3".into();
        assert_eq!(ProjectionModel::from_bytes(&m.to_bytes()).unwrap(), m);
        assert!(ProjectionModel::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn self_key_is_rank_one() {
        let p: Arc<dyn EmbeddingProvider> = Arc::new(HashEmbedding::new(8));
        let c = corpus(20);
        let hits = select_examples(&ProjectionModel::identity(8, 1.0), p, "sentence 7", &c, 3).unwrap();
        assert_eq!(hits[0].id, "i07");
        assert_eq!(hits[0].score, 0.0);
    }
}
