//! Testbed builders: unlabeled, counterfactual, diverse and negative
//! corpora derived from a labeled source corpus.
//!
//! All builders are pure functions of the source corpus and the plan. The
//! number of corrupted entries is `floor(rate * n + 0.5)` and wrong labels are
//! drawn uniformly from the label space minus the original label.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{parse_answer, Corpus, CorpusKind, Instance, ParsedAnswer, TaskKind};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

const QA_OPTIONS: [&str; 5] = ["A", "B", "C", "D", "E"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestbedKind {
    Unlabeled,
    Counterfactual,
    Diverse,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbPlan {
    pub seed: u64,
    pub rate: f64,
    pub source: String,
    pub kind: TestbedKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub original_value: String,
    pub corrupted_value: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub negative_awareness: bool,
}

/// Sidecar listing every corrupted entry, in corpus order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub negative_awareness: bool,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<ManifestEntry> = crate::util::read_jsonl(path)?;
        Ok(Manifest {
            negative_awareness: entries.iter().any(|e| e.negative_awareness),
            entries,
        })
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed {
    pub corpus: Corpus,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CorruptOptions {
    /// Allow wrong-option corruption of multiple-choice corpora.
    pub allow_qa: bool,
}

fn require_labeled(c: &Corpus, op: &str) -> Result<()> {
    if c.kind != CorpusKind::Labeled {
        return Err(Error::InvalidArgument(format!(
            "{op} needs a labeled corpus, `{}` is {}",
            c.name,
            c.kind.label()
        )));
    }
    Ok(())
}

pub fn strip_labels(c: &Corpus) -> Result<Corpus> {
    require_labeled(c, "strip_labels")?;
    let entries = c
        .entries
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.set_value(None);
            e
        })
        .collect();
    Ok(Corpus {
        name: format!("{}-unlabeled", c.name),
        task: c.task,
        kind: CorpusKind::Unlabeled,
        entries,
        label_space: None,
    })
}

/// `floor(rate * n + 0.5)`.
pub fn corruption_count(rate: f64, n: usize) -> usize {
    (rate * n as f64 + 0.5).floor() as usize
}

/// Closed answer set that wrong labels are drawn from.
fn wrong_label_pool(c: &Corpus, opts: CorruptOptions) -> Result<Vec<String>> {
    let pool: Vec<String> = match c.task {
        TaskKind::TripleExtraction => c.relation_space().into_iter().collect(),
        TaskKind::QuestionAnswering => {
            if !opts.allow_qa {
                return Err(Error::InvalidArgument(
                    "counterfactual corruption of question-answering corpora is disabled".into(),
                ));
            }
            QA_OPTIONS.iter().map(|s| s.to_string()).collect()
        }
        _ => match &c.label_space {
            Some(space) => space.iter().cloned().collect(),
            None => crate::corpus::distinct_values(&c.entries).into_iter().collect(),
        },
    };
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "label space of `{}` has {} member(s); no wrong label exists",
            c.name,
            pool.len()
        )));
    }
    Ok(pool)
}

/// Swap the relation of a triple-formatted value, keeping the entity text.
fn replace_relation(value: &str, relation: &str) -> Option<String> {
    let open = value.find(['(', '{'])?;
    let (o, cl) = if value.as_bytes()[open] == b'(' { ('(', ')') } else { ('{', '}') };
    let inner_end = open + 1 + value[open + 1..].find(cl)?;
    let parts: Vec<&str> = value[open + 1..inner_end].split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return None;
    }
    Some(format!(
        "{}{o}{}, {relation}, {}{cl}{}",
        &value[..open],
        parts[0],
        parts[2],
        &value[inner_end + 1..]
    ))
}

fn wrong_value(
    task: TaskKind,
    original: &str,
    pool: &[String],
    rng: &mut SeededRng,
) -> Result<String> {
    let current = match task {
        TaskKind::TripleExtraction => match parse_answer(task, original, None) {
            ParsedAnswer::Triple(t) => t.relation,
            _ => {
                return Err(Error::InvalidCorpus(format!(
                    "value `{original}` is not a triple"
                )))
            }
        },
        TaskKind::QuestionAnswering => match parse_answer(task, original, None) {
            ParsedAnswer::Option(c) => c.to_string(),
            _ => original.to_string(),
        },
        _ => original.to_string(),
    };
    let candidates: Vec<&String> = pool.iter().filter(|l| **l != current).collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no wrong label available for `{original}`"
        )));
    }
    let pick = candidates[rng.below(candidates.len() as u64) as usize];
    match task {
        TaskKind::TripleExtraction => replace_relation(original, pick)
            .ok_or_else(|| Error::InvalidCorpus(format!("value `{original}` is not a triple"))),
        _ => Ok(pick.clone()),
    }
}

pub fn corrupt(c: &Corpus, rate: f64, seed: u64) -> Result<Perturbed> {
    corrupt_with(c, rate, seed, CorruptOptions::default())
}

pub fn corrupt_with(c: &Corpus, rate: f64, seed: u64, opts: CorruptOptions) -> Result<Perturbed> {
    require_labeled(c, "corrupt")?;
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "corruption rate {rate} outside (0, 1]"
        )));
    }
    let pool = wrong_label_pool(c, opts)?;
    let mut rng = SeededRng::new(seed);
    let count = corruption_count(rate, c.len());
    let mut chosen = rng.sample_indices(c.len(), count);
    chosen.sort_unstable();

    let mut entries = c.entries.clone();
    let mut manifest = Manifest::default();
    for i in chosen {
        let entry: &mut Instance = &mut entries[i];
        let original = entry.value.clone().expect("labeled corpus");
        let corrupted = wrong_value(c.task, &original, &pool, &mut rng)?;
        entry.set_value(Some(corrupted.clone()));
        manifest.entries.push(ManifestEntry {
            id: entry.id.clone(),
            original_value: original,
            corrupted_value: corrupted,
            negative_awareness: false,
        });
    }
    Ok(Perturbed {
        corpus: Corpus {
            name: format!("{}-cf{}", c.name, rate),
            task: c.task,
            kind: CorpusKind::Counterfactual { rate },
            entries,
            label_space: c.label_space.clone(),
        },
        manifest,
    })
}

pub fn make_negative_corpus(c: &Corpus, seed: u64) -> Result<Perturbed> {
    let mut out = corrupt(c, 1.0, seed)?;
    out.corpus.name = format!("{}-negative", c.name);
    out.manifest.negative_awareness = true;
    for e in &mut out.manifest.entries {
        e.negative_awareness = true;
    }
    Ok(out)
}

/// Retrieval corpus made only of other tasks' corpora. The target's own
/// entries never appear; ids are prefixed `<source name>/`.
pub fn merge_diverse(target: &Corpus, others: &[&Corpus]) -> Result<Corpus> {
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for other in others {
        require_labeled(other, "merge_diverse")?;
        if other.name == target.name {
            return Err(Error::InvalidArgument(format!(
                "diverse corpus source `{}` collides with the target",
                other.name
            )));
        }
        for e in &other.entries {
            let mut e = e.clone();
            e.id = format!("{}/{}", other.name, e.id);
            if !seen.insert(e.id.clone()) {
                return Err(Error::DuplicateId(e.id));
            }
            entries.push(e);
        }
    }
    Ok(Corpus {
        name: format!("{}-diverse", target.name),
        task: target.task,
        kind: CorpusKind::Diverse,
        entries,
        label_space: None,
    })
}

/// Build a testbed according to a plan. `others` is only consulted for
/// diverse corpora.
pub fn build(plan: &PerturbPlan, source: &Corpus, others: &[&Corpus]) -> Result<Perturbed> {
    match plan.kind {
        TestbedKind::Unlabeled => Ok(Perturbed {
            corpus: strip_labels(source)?,
            manifest: Manifest::default(),
        }),
        TestbedKind::Counterfactual => corrupt(source, plan.rate, plan.seed),
        TestbedKind::Negative => make_negative_corpus(source, plan.seed),
        TestbedKind::Diverse => Ok(Perturbed {
            corpus: merge_diverse(source, others)?,
            manifest: Manifest::default(),
        }),
    }
}
