//! Detect-and-correct: an LLM judge checks the label of each retrieved
//! example and proposes a replacement when it deems the label wrong.
//! Unlabeled examples are labeled by the judge instead.
//!
//! Judge prompt layout (detection):
//!
//! ```text
//! This is a <task> task. Please determine whether the label assigned to the input sentence is correct. ...
//! labels: <l1> | <l2> | ...      (closed label sets only)
//! sentence: <key>
//! label: <value>
//! ```
//!
//! Labeling prompts omit the `label:` line. Verdict parsing: the output is
//! an incorrect-label verdict iff it contains the word `incorrect`; the
//! proposed label is parsed from the text after the last `correct label`
//! (or after `incorrect` when that phrase is missing) and must be a valid
//! answer for the task. Anything else is treated as a correct-label verdict.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{load_corpus, parse_answer, serialize_answer, Corpus, CorpusKind, ParsedAnswer, TaskKind};
use crate::error::{Error, Result};
use crate::generate::{Backend, ExampleTransform, Generator};
use crate::perturb::Manifest;
use crate::retrieve::embedding::{params, resolve};
use crate::retrieve::Example;
use crate::util::{normalize, sha256_hex};

const DETECT_TEMPLATE: &str = include_str!("../assets/judge/detect.txt");
const LABEL_TEMPLATE: &str = include_str!("../assets/judge/label.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeTemplates {
    /// `{task}` is replaced by the task's display name.
    pub detect: String,
    /// `{task}` and `{purpose}` are substituted.
    pub label: String,
    /// Optional clause describing the labeling goal, e.g.
    /// " aimed at determining whether a given sentence is related to an Adverse Drug Event (ADE)".
    pub purpose: String,
}

impl Default for JudgeTemplates {
    fn default() -> Self {
        JudgeTemplates {
            detect: DETECT_TEMPLATE.to_string(),
            label: LABEL_TEMPLATE.to_string(),
            purpose: String::new(),
        }
    }
}

fn labels_line(space: Option<&BTreeSet<String>>) -> String {
    match space {
        Some(s) if !s.is_empty() => format!("labels: {}\n", s.iter().cloned().collect::<Vec<_>>().join(" | ")),
        _ => String::new(),
    }
}

pub fn detect_prompt(t: &JudgeTemplates, task: TaskKind, key: &str, value: &str, space: Option<&BTreeSet<String>>) -> String {
    format!(
        "{}\n{}sentence: {}\nlabel: {}",
        t.detect.replace("{task}", task.display_name()),
        labels_line(space),
        crate::generate::prompt_line(key),
        crate::generate::prompt_line(value)
    )
}

pub fn label_prompt(t: &JudgeTemplates, task: TaskKind, key: &str, space: Option<&BTreeSet<String>>) -> String {
    format!(
        "{}\n{}sentence: {}",
        t.label
            .replace("{task}", task.display_name())
            .replace("{purpose}", &t.purpose),
        labels_line(space),
        crate::generate::prompt_line(key)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    CorrectLabel,
    IncorrectLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub instance_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_value: Option<String>,
    pub raw_judge_output: String,
}

/// Validate a proposed answer and return its canonical text.
fn valid_label(task: TaskKind, text: &str, space: Option<&BTreeSet<String>>) -> Option<String> {
    match parse_answer(task, text, space) {
        ParsedAnswer::NoAnswer => None,
        ParsedAnswer::Label(l) => match space {
            Some(s) if !s.is_empty() => s.contains(&l).then_some(l),
            _ => Some(l),
        },
        other => Some(serialize_answer(&other)),
    }
}

fn has_word(hay: &str, word: &str) -> Option<usize> {
    hay.split(|c: char| !c.is_alphanumeric())
        .any(|t| t == word)
        .then(|| hay.rfind(word).expect("word present"))
}

/// Parse a judge's free-text verdict.
pub fn parse_verdict(
    task: TaskKind,
    original: &str,
    raw: &str,
    space: Option<&BTreeSet<String>>,
) -> (Verdict, Option<String>) {
    let lower = raw.to_lowercase();
    let Some(at) = has_word(&lower, "incorrect") else {
        return (Verdict::CorrectLabel, None);
    };
    let tail_start = match lower.rfind("correct label") {
        Some(p) if p + "correct label".len() <= lower.len() && !lower[..p].ends_with("in") => p + "correct label".len(),
        _ => at + "incorrect".len(),
    };
    // Byte offsets of the lowercased text may not line up with `raw`, so
    // parse the lowercased tail; label parsing is case-insensitive anyway.
    let tail = &lower[tail_start..];
    match valid_label(task, tail, space) {
        Some(l) if normalize(&l) != normalize(original) => (Verdict::IncorrectLabel, Some(l)),
        _ => {
            log::warn!("unparseable judge verdict {raw:?}; keeping the original label");
            (Verdict::CorrectLabel, None)
        }
    }
}

/// Judge one labeled instance.
pub fn detect_and_correct(
    id: &str,
    key: &str,
    value: &str,
    task: TaskKind,
    judge: &Generator,
    space: Option<&BTreeSet<String>>,
    templates: &JudgeTemplates,
) -> Result<CorrectionOutcome> {
    let raw = judge.generate(&detect_prompt(templates, task, key, value, space))?.text;
    let (verdict, revised) = parse_verdict(task, value, &raw, space);
    Ok(CorrectionOutcome {
        instance_id: id.to_string(),
        verdict,
        revised_value: revised,
        raw_judge_output: raw,
    })
}

/// Ask the judge for a label; `None` when its answer is not a valid label.
pub fn label_unlabeled(
    key: &str,
    task: TaskKind,
    judge: &Generator,
    space: Option<&BTreeSet<String>>,
    templates: &JudgeTemplates,
) -> Result<(Option<String>, String)> {
    let raw = judge.generate(&label_prompt(templates, task, key, space))?.text;
    Ok((valid_label(task, &raw, space), raw))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionAction {
    Detect,
    Label,
}

/// One line of `corrections.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionLog {
    pub instance_id: String,
    pub action: CorrectionAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_value: Option<String>,
    pub raw_judge_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CorrectionLog {
    /// Value the example should carry after judgment (`None` drops an
    /// unlabeled example).
    fn resulting_value(&self) -> Option<String> {
        match self.action {
            CorrectionAction::Detect => self.revised_value.clone().or_else(|| self.original_value.clone()),
            CorrectionAction::Label => self.revised_value.clone(),
        }
    }
}

/// Applies judgments to retrieved examples. Each corpus entry is judged at
/// most once per corrector.
pub struct RetrievalCorrector {
    judge: Arc<Generator>,
    task: TaskKind,
    space: Option<BTreeSet<String>>,
    templates: JudgeTemplates,
    memo: Mutex<HashMap<String, Arc<OnceLock<CorrectionLog>>>>,
}

impl RetrievalCorrector {
    pub fn new(judge: Arc<Generator>, task: TaskKind, space: Option<BTreeSet<String>>, templates: JudgeTemplates) -> Self {
        RetrievalCorrector {
            judge,
            task,
            space,
            templates,
            memo: Mutex::new(HashMap::new()),
        }
    }

    fn judge_example(&self, ex: &Example) -> CorrectionLog {
        let cell = {
            let mut memo = self.memo.lock().expect("memo poisoned");
            memo.entry(ex.id.clone()).or_default().clone()
        };
        cell.get_or_init(|| {
            let space = self.space.as_ref();
            match &ex.value {
                Some(value) => {
                    match detect_and_correct(&ex.id, &ex.key, value, self.task, &self.judge, space, &self.templates) {
                        Ok(o) => CorrectionLog {
                            instance_id: ex.id.clone(),
                            action: CorrectionAction::Detect,
                            original_value: Some(value.clone()),
                            verdict: Some(o.verdict),
                            revised_value: o.revised_value,
                            raw_judge_output: o.raw_judge_output,
                            error: None,
                        },
                        Err(e) => CorrectionLog {
                            instance_id: ex.id.clone(),
                            action: CorrectionAction::Detect,
                            original_value: Some(value.clone()),
                            verdict: None,
                            revised_value: None,
                            raw_judge_output: String::new(),
                            error: Some(e.to_string()),
                        },
                    }
                }
                None => match label_unlabeled(&ex.key, self.task, &self.judge, space, &self.templates) {
                    Ok((label, raw)) => CorrectionLog {
                        instance_id: ex.id.clone(),
                        action: CorrectionAction::Label,
                        original_value: None,
                        verdict: None,
                        revised_value: label,
                        raw_judge_output: raw,
                        error: None,
                    },
                    Err(e) => CorrectionLog {
                        instance_id: ex.id.clone(),
                        action: CorrectionAction::Label,
                        original_value: None,
                        verdict: None,
                        revised_value: None,
                        raw_judge_output: String::new(),
                        error: Some(e.to_string()),
                    },
                },
            }
        })
        .clone()
    }

    /// All judgments so far, ordered by instance id.
    pub fn log(&self) -> Vec<CorrectionLog> {
        let memo = self.memo.lock().expect("memo poisoned");
        let mut out: Vec<CorrectionLog> = memo.values().filter_map(|c| c.get().cloned()).collect();
        out.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        out
    }

    pub fn judge_calls(&self) -> usize {
        self.judge.backend_calls()
    }
}

impl ExampleTransform for RetrievalCorrector {
    fn transform(&self, examples: Vec<Example>) -> Result<Vec<Example>> {
        Ok(examples
            .into_iter()
            .filter_map(|mut ex| {
                let log = self.judge_example(&ex);
                if log.error.is_some() {
                    // failed judgment: keep the example untouched
                    return Some(ex);
                }
                match log.resulting_value() {
                    Some(v) => {
                        ex.value = Some(v);
                        Some(ex)
                    }
                    None => None,
                }
            })
            .collect())
    }
}

/// Offline rewrite of a whole corpus. Unlabeled entries the judge cannot
/// label are dropped so the output stays fully labeled.
pub fn correct_corpus(
    corpus: &Corpus,
    judge: Arc<Generator>,
    space: Option<BTreeSet<String>>,
    templates: JudgeTemplates,
) -> Result<(Corpus, Vec<CorrectionLog>)> {
    let corrector = RetrievalCorrector::new(judge, corpus.task, space, templates);
    let mut entries = Vec::with_capacity(corpus.len());
    for e in &corpus.entries {
        let log = corrector.judge_example(&Example {
            id: e.id.clone(),
            key: e.key.clone(),
            value: e.value.clone(),
        });
        if let Some(err) = &log.error {
            return Err(Error::Backend {
                backend: corrector.judge.backend().id().to_string(),
                msg: format!("judging `{}`: {err}", e.id),
            });
        }
        match log.resulting_value() {
            Some(v) => {
                let mut e = e.clone();
                if e.value.as_deref() != Some(v.as_str()) {
                    e.set_value(Some(v));
                }
                entries.push(e);
            }
            None => log::warn!("dropping `{}`: judge produced no valid label", e.id),
        }
    }
    let kind = match corpus.kind {
        CorpusKind::Unlabeled => CorpusKind::Labeled,
        k => k,
    };
    let out = Corpus {
        name: format!("{}-corrected", corpus.name),
        task: corpus.task,
        kind,
        entries,
        label_space: corpus.label_space.clone(),
    };
    Ok((out, corrector.log()))
}

/// Judge that knows the true labels, keyed by instance text.
#[derive(Debug, Clone)]
pub struct OracleJudge {
    id: String,
    truth: HashMap<String, String>,
}

impl OracleJudge {
    fn new(truth: HashMap<String, String>) -> Self {
        let mut pairs: Vec<_> = truth.iter().collect();
        pairs.sort();
        let id = format!("oracle:{}", &sha256_hex(serde_json::to_string(&pairs).expect("pairs"))[..16]);
        OracleJudge { id, truth }
    }

    /// Truth taken from a labeled source corpus.
    pub fn from_corpus(source: &Corpus) -> Self {
        Self::new(
            source
                .entries
                .iter()
                .filter_map(|e| Some((crate::generate::prompt_line(&e.key), e.value.clone()?)))
                .collect(),
        )
    }

    /// Truth recovered from a perturbed corpus and its manifest.
    pub fn from_manifest(perturbed: &Corpus, manifest: &Manifest) -> Self {
        let originals: HashMap<&str, &str> = manifest
            .entries
            .iter()
            .map(|m| (m.id.as_str(), m.original_value.as_str()))
            .collect();
        Self::new(
            perturbed
                .entries
                .iter()
                .filter_map(|e| {
                    let v = originals
                        .get(e.id.as_str())
                        .map(|s| s.to_string())
                        .or_else(|| e.value.clone())?;
                    Some((crate::generate::prompt_line(&e.key), v))
                })
                .collect(),
        )
    }
}

impl Backend for OracleJudge {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let field = |name: &str| prompt.lines().rev().find_map(|l| l.strip_prefix(name));
        let Some(key) = field("sentence: ") else {
            return Ok(String::new());
        };
        let truth = self.truth.get(key);
        Ok(match (field("label: "), truth) {
            (Some(shown), Some(t)) if normalize(shown) != normalize(t) => format!("incorrect. correct label: {t}"),
            (Some(_), _) => "the label is correct".to_string(),
            (None, Some(t)) => t.clone(),
            (None, None) => String::new(),
        })
    }
}

pub(crate) fn oracle_factory(p: &Map<String, Value>, base: &Path) -> Result<Arc<dyn Backend>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct P {
        corpus: String,
        #[serde(default)]
        manifest: Option<String>,
        #[serde(default = "default_task")]
        task: String,
    }
    fn default_task() -> String {
        "text-classification".into()
    }
    let p: P = params("oracle backend", p)?;
    let task: TaskKind = p.task.parse()?;
    let corpus = load_corpus(&resolve(base, &p.corpus), task)?;
    Ok(Arc::new(match p.manifest {
        Some(m) => OracleJudge::from_manifest(&corpus, &Manifest::load(&resolve(base, &m))?),
        None => OracleJudge::from_corpus(&corpus),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Instance;
    use crate::generate::MockFixed;
    use crate::perturb::{corrupt, strip_labels};

    fn space() -> BTreeSet<String> {
        ["True", "False"].iter().map(|s| s.to_string()).collect()
    }

    fn fixed(text: &str) -> Generator {
        Generator::uncached(Arc::new(MockFixed::new(text)))
    }

    fn fixture(n: usize) -> Corpus {
        let entries = (0..n)
            .map(|i| {
                Instance::new(format!("{i}"), TaskKind::TextClassification, format!("key {i}"))
                    .with_value(if i % 3 == 0 { "True" } else { "False" })
            })
            .collect();
        Corpus::from_instances("fx", TaskKind::TextClassification, entries).unwrap()
    }

    #[test]
    fn classification_prompt_is_verbatim() {
        let p = detect_prompt(&JudgeTemplates::default(), TaskKind::TextClassification, "s", "False", None);
        assert!(p.starts_with(
            "This is a text classification task. Please determine whether the label assigned to the input sentence is correct. If the label is incorrect, please provide the correct label.\n"
        ));
        let p = label_prompt(&JudgeTemplates::default(), TaskKind::TextClassification, "s", None);
        assert!(p.starts_with(
            "This is a text classification task. Please assign a label to each provided sentence to support this task"
        ));
    }

    #[test]
    fn incorrect_with_label() {
        let o = detect_and_correct(
            "1",
            "k",
            "False",
            TaskKind::TextClassification,
            &fixed("incorrect. correct label: True"),
            Some(&space()),
            &JudgeTemplates::default(),
        )
        .unwrap();
        assert_eq!(o.verdict, Verdict::IncorrectLabel);
        assert_eq!(o.revised_value.as_deref(), Some("True"));
    }

    #[test]
    fn correct_is_no_op() {
        let o = detect_and_correct(
            "1",
            "k",
            "False",
            TaskKind::TextClassification,
            &fixed("the label is correct"),
            Some(&space()),
            &JudgeTemplates::default(),
        )
        .unwrap();
        assert_eq!(o.verdict, Verdict::CorrectLabel);
        assert!(o.revised_value.is_none());
    }

    #[test]
    fn unparseable_verdict_defaults_to_correct() {
        let (v, r) = parse_verdict(TaskKind::TextClassification, "False", "incorrect, but unsure", Some(&space()));
        assert_eq!((v, r), (Verdict::CorrectLabel, None));
        let (v, r) = parse_verdict(TaskKind::TextClassification, "False", "Incorrect: True", Some(&space()));
        assert_eq!((v, r.as_deref()), (Verdict::IncorrectLabel, Some("True")));
    }

    #[test]
    fn labeling_validates_against_space() {
        let s = space();
        let (l, _) =
            label_unlabeled("k", TaskKind::TextClassification, &fixed("True"), Some(&s), &JudgeTemplates::default()).unwrap();
        assert_eq!(l.as_deref(), Some("True"));
        let (l, _) =
            label_unlabeled("k", TaskKind::TextClassification, &fixed("maybe"), Some(&s), &JudgeTemplates::default()).unwrap();
        assert!(l.is_none());
    }

    #[test]
    fn oracle_restores_manifest_originals() {
        let c = fixture(12);
        let cf = corrupt(&c, 1.0, 2).unwrap();
        let judge = Arc::new(Generator::uncached(Arc::new(OracleJudge::from_manifest(&cf.corpus, &cf.manifest))));
        for e in &cf.corpus.entries {
            let o = detect_and_correct(
                &e.id,
                &e.key,
                e.value.as_ref().unwrap(),
                TaskKind::TextClassification,
                &judge,
                Some(&space()),
                &JudgeTemplates::default(),
            )
            .unwrap();
            assert_eq!(o.revised_value, c.get(&e.id).unwrap().value);
            // second pass sees the corrected value and leaves it alone
            let again = detect_and_correct(
                &e.id,
                &e.key,
                o.revised_value.as_ref().unwrap(),
                TaskKind::TextClassification,
                &judge,
                Some(&space()),
                &JudgeTemplates::default(),
            )
            .unwrap();
            assert_eq!(again.verdict, Verdict::CorrectLabel);
        }
    }

    #[test]
    fn oracle_relabels_stripped_corpus() {
        let c = fixture(9);
        let stripped = strip_labels(&c).unwrap();
        let judge = Arc::new(Generator::uncached(Arc::new(OracleJudge::from_corpus(&c))));
        let (out, log) = correct_corpus(&stripped, judge, Some(space()), JudgeTemplates::default()).unwrap();
        assert_eq!(out.kind, CorpusKind::Labeled);
        let values: Vec<_> = out.entries.iter().map(|e| e.value.clone()).collect();
        let expected: Vec<_> = c.entries.iter().map(|e| e.value.clone()).collect();
        assert_eq!(values, expected);
        assert_eq!(log.len(), 9);
    }

    #[test]
    fn each_entry_judged_once() {
        let judge = Arc::new(fixed("the label is correct"));
        let corr = RetrievalCorrector::new(judge, TaskKind::TextClassification, Some(space()), JudgeTemplates::default());
        let ex = Example {
            id: "a".into(),
            key: "k".into(),
            value: Some("True".into()),
        };
        for _ in 0..5 {
            let out = corr.transform(vec![ex.clone()]).unwrap();
            assert_eq!(out, vec![ex.clone()]);
        }
        assert_eq!(corr.judge_calls(), 1);
        assert_eq!(corr.log().len(), 1);
    }
}
