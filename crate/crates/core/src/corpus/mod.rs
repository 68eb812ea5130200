//! Corpus data model and the line-delimited corpus file format.
//!
//! One record per line:
//!
//! ```text
//! {"id": "...", "task": "text-classification", "key": "...", "value": "...", "meta": {...}}
//! ```
//!
//! `value` and `meta` may be absent. A file is either fully labeled or fully
//! unlabeled; partially labeled files are rejected. `meta` may override the
//! instruction, context and response of an instance with the keys
//! `instruction`, `context` and `response`.

mod answer;
mod templates;

pub use answer::{parse_answer, serialize_answer, ParsedAnswer, Triple};
pub use templates::{default_instruction, Instructions};

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    TripleExtraction,
    LinkPrediction,
    TextClassification,
    QuestionAnswering,
    NlInference,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::TripleExtraction,
        TaskKind::LinkPrediction,
        TaskKind::TextClassification,
        TaskKind::QuestionAnswering,
        TaskKind::NlInference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::TripleExtraction => "triple-extraction",
            TaskKind::LinkPrediction => "link-prediction",
            TaskKind::TextClassification => "text-classification",
            TaskKind::QuestionAnswering => "question-answering",
            TaskKind::NlInference => "nl-inference",
        }
    }

    /// Human name used inside judge prompts ("text classification").
    pub fn display_name(self) -> &'static str {
        match self {
            TaskKind::TripleExtraction => "triple extraction",
            TaskKind::LinkPrediction => "link prediction",
            TaskKind::TextClassification => "text classification",
            TaskKind::QuestionAnswering => "question answering",
            TaskKind::NlInference => "natural language inference",
        }
    }

    /// Tasks whose answers come from a closed set of label strings.
    pub fn has_label_space(self) -> bool {
        matches!(
            self,
            TaskKind::TextClassification | TaskKind::LinkPrediction | TaskKind::NlInference
        )
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Ok(match norm.as_str() {
            "triple-extraction" | "triple" | "re" => TaskKind::TripleExtraction,
            "link-prediction" | "link" | "lp" => TaskKind::LinkPrediction,
            "text-classification" | "classification" | "tc" => TaskKind::TextClassification,
            "question-answering" | "qa" => TaskKind::QuestionAnswering,
            "nl-inference" | "nli" => TaskKind::NlInference,
            _ => {
                return Err(Error::Unknown {
                    registry: "task kind",
                    name: s.to_string(),
                })
            }
        })
    }
}

/// Provenance of a retrieval corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorpusKind {
    Labeled,
    Unlabeled,
    Counterfactual { rate: f64 },
    Diverse,
    /// Retrieval disabled.
    None,
}

impl CorpusKind {
    pub fn label(&self) -> String {
        match self {
            CorpusKind::Labeled => "labeled".into(),
            CorpusKind::Unlabeled => "unlabeled".into(),
            CorpusKind::Counterfactual { rate } => format!("counterfactual@{rate}"),
            CorpusKind::Diverse => "diverse".into(),
            CorpusKind::None => "none".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub task: TaskKind,
    pub key: String,
    pub value: Option<String>,
    pub meta: Option<Map<String, Value>>,
}

impl Instance {
    pub fn new(id: impl Into<String>, task: TaskKind, key: impl Into<String>) -> Self {
        Instance {
            id: id.into(),
            task,
            key: key.into(),
            value: None,
            meta: None,
        }
    }

    pub fn with_value(mut self, value: impl Into<String>) -> Self {
        self.value = Some(value.into());
        self
    }

    fn meta_str(&self, field: &str) -> Option<&str> {
        self.meta.as_ref()?.get(field)?.as_str()
    }

    pub fn instruction(&self) -> String {
        self.meta_str("instruction")
            .map(str::to_string)
            .unwrap_or_else(|| default_instruction(self.task).to_string())
    }

    pub fn context(&self) -> &str {
        self.meta_str("context").unwrap_or(&self.key)
    }

    pub fn response(&self) -> Option<&str> {
        let value = self.value.as_deref()?;
        Some(self.meta_str("response").unwrap_or(value))
    }

    /// Replace the value, dropping any response override so the rendered
    /// response follows the new value.
    pub fn set_value(&mut self, value: Option<String>) {
        self.value = value;
        if let Some(meta) = self.meta.as_mut() {
            meta.remove("response");
            if meta.is_empty() {
                self.meta = None;
            }
        }
    }

    pub fn to_record(&self) -> Record {
        Record {
            id: self.id.clone(),
            task: self.task,
            key: self.key.clone(),
            value: self.value.clone(),
            meta: self.meta.clone(),
        }
    }
}

/// On-disk form of one corpus line. Field order is the canonical order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub task: TaskKind,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Map<String, Value>>,
}

impl From<Record> for Instance {
    fn from(r: Record) -> Self {
        Instance {
            id: r.id,
            task: r.task,
            key: r.key,
            value: r.value,
            meta: r.meta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub task: TaskKind,
    pub kind: CorpusKind,
    pub entries: Vec<Instance>,
    pub label_space: Option<BTreeSet<String>>,
}

impl Corpus {
    /// Build and validate a corpus from in-memory instances. The kind is
    /// inferred as for [`load_corpus`].
    pub fn from_instances(
        name: impl Into<String>,
        task: TaskKind,
        entries: Vec<Instance>,
    ) -> Result<Self> {
        validate_entries(&entries, None)?;
        let labeled = entries.iter().filter(|e| e.value.is_some()).count();
        let kind = if labeled == 0 && !entries.is_empty() {
            CorpusKind::Unlabeled
        } else {
            CorpusKind::Labeled
        };
        let label_space = if kind == CorpusKind::Labeled && task.has_label_space() {
            Some(distinct_values(&entries))
        } else {
            None
        };
        Ok(Corpus {
            name: name.into(),
            task,
            kind,
            entries,
            label_space,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Distinct relation names of a triple-extraction corpus.
    pub fn relation_space(&self) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter_map(|e| e.value.as_deref())
            .filter_map(|v| match parse_answer(TaskKind::TripleExtraction, v, None) {
                ParsedAnswer::Triple(t) => Some(t.relation),
                _ => None,
            })
            .collect()
    }

    /// Canonical serialization: one record per line, fixed field order,
    /// trailing newline.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&e.to_record()).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, self.to_jsonl().as_bytes())
    }
}

pub(crate) fn distinct_values(entries: &[Instance]) -> BTreeSet<String> {
    entries.iter().filter_map(|e| e.value.clone()).collect()
}

fn validate_entries(entries: &[Instance], path: Option<&Path>) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, e) in entries.iter().enumerate() {
        let bad = |msg: &str| match path {
            Some(p) => Error::Parse {
                path: p.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            },
            None => Error::InvalidCorpus(format!("entry {}: {msg}", i + 1)),
        };
        if e.id.is_empty() {
            return Err(bad("empty id"));
        }
        if e.key.trim().is_empty() {
            return Err(bad("empty key"));
        }
        if !seen.insert(e.id.as_str()) {
            return Err(Error::DuplicateId(e.id.clone()));
        }
    }
    let labeled = entries.iter().filter(|e| e.value.is_some()).count();
    if labeled != 0 && labeled != entries.len() {
        return Err(Error::PartialLabels {
            labeled,
            total: entries.len(),
        });
    }
    Ok(())
}

/// Parse corpus text in the line-delimited format. Blank lines are skipped;
/// line numbers in errors are 1-based physical lines.
pub fn parse_corpus(text: &str, name: &str, task: TaskKind, path: &Path) -> Result<Corpus> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if record.key.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        entries.push(Instance::from(record));
    }
    validate_entries(&entries, Some(path))?;
    Corpus::from_instances(name, task, entries)
}

pub fn load_corpus(path: &Path, task: TaskKind) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    parse_corpus(&text, &name, task, path)
}
