//! Task metrics (micro / weighted / macro P-R-F1, triple element scores,
//! AUROC, AUPRC) and negative-awareness rates.
//!
//! Conventions:
//! - A record whose output could not be parsed (`NoAnswer`) is a wrong
//!   prediction. For single-label tasks every record therefore carries one
//!   prediction and one gold, and micro P = R = F1 = accuracy.
//! - For triple extraction only parsed triples count as predictions.
//! - Per-class precision or recall with an empty denominator is 0.
//! - AUROC is the normalized Mann-Whitney U with ties counted as 1/2.
//! - AUPRC is average precision: Σ (Rᵢ − Rᵢ₋₁)·Pᵢ over descending score
//!   thresholds, tied scores forming one threshold.
//! - Awareness rates with an empty denominator are undefined (`None`).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{ParsedAnswer, TaskKind, Triple};
use crate::error::{Error, Result};
use crate::generate::{GenerationRecord, NegativityClaim};
use crate::util::normalize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        Prf {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn non_empty(records: &[GenerationRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Metric("no records".into()));
    }
    Ok(())
}

fn is_triple_task(records: &[GenerationRecord]) -> bool {
    records.iter().any(|r| matches!(r.gold, ParsedAnswer::Triple(_)))
}

pub fn micro_prf(records: &[GenerationRecord]) -> Result<Prf> {
    non_empty(records)?;
    let correct = records.iter().filter(|r| r.correct).count();
    if is_triple_task(records) {
        let predicted = records.iter().filter(|r| matches!(r.parsed, ParsedAnswer::Triple(_))).count();
        let gold = records.iter().filter(|r| matches!(r.gold, ParsedAnswer::Triple(_))).count();
        Ok(Prf::new(ratio(correct, predicted), ratio(correct, gold)))
    } else {
        let acc = ratio(correct, records.len());
        Ok(Prf {
            precision: acc,
            recall: acc,
            f1: acc,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripleElement {
    Head,
    Relation,
    Tail,
}

impl TripleElement {
    fn get(self, t: &Triple) -> &str {
        match self {
            TripleElement::Head => &t.head,
            TripleElement::Relation => &t.relation,
            TripleElement::Tail => &t.tail,
        }
    }
}

pub fn element_prf(records: &[GenerationRecord], element: TripleElement) -> Result<Prf> {
    non_empty(records)?;
    if !records.iter().all(|r| matches!(r.gold, ParsedAnswer::Triple(_))) {
        return Err(Error::Metric("element scores need triple gold answers".into()));
    }
    let mut predicted = 0;
    let mut hit = 0;
    for r in records {
        if let (ParsedAnswer::Triple(p), ParsedAnswer::Triple(g)) = (&r.parsed, &r.gold) {
            predicted += 1;
            if element.get(p) == element.get(g) {
                hit += 1;
            }
        }
    }
    Ok(Prf::new(ratio(hit, predicted), ratio(hit, records.len())))
}

fn label_of(a: &ParsedAnswer) -> Option<String> {
    match a {
        ParsedAnswer::Label(l) => Some(normalize(l)),
        ParsedAnswer::Option(c) => Some(c.to_string()),
        _ => None,
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct ClassCounts {
    tp: usize,
    predicted: usize,
    support: usize,
}

fn class_counts(records: &[GenerationRecord], space: Option<&BTreeSet<String>>) -> Result<BTreeMap<String, ClassCounts>> {
    let mut classes: BTreeMap<String, ClassCounts> = BTreeMap::new();
    for l in space.into_iter().flatten() {
        classes.entry(normalize(l)).or_default();
    }
    for r in records {
        let gold = label_of(&r.gold)
            .ok_or_else(|| Error::Metric(format!("record `{}` has no single-label gold", r.instance_id)))?;
        let pred = label_of(&r.parsed);
        classes.entry(gold.clone()).or_default().support += 1;
        if let Some(p) = pred {
            let c = classes.entry(p.clone()).or_default();
            c.predicted += 1;
            if p == gold {
                c.tp += 1;
            }
        }
    }
    Ok(classes)
}

/// Per-class P/R/F1 averaged with weights proportional to gold support.
pub fn weighted_prf(records: &[GenerationRecord], label_space: Option<&BTreeSet<String>>) -> Result<Prf> {
    non_empty(records)?;
    let classes = class_counts(records, label_space)?;
    let total = records.len() as f64;
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for c in classes.values() {
        let w = c.support as f64 / total;
        let cp = ratio(c.tp, c.predicted);
        let cr = ratio(c.tp, c.support);
        p += w * cp;
        r += w * cr;
        f += w * f1(cp, cr);
    }
    Ok(Prf {
        precision: p,
        recall: r,
        f1: f,
    })
}

/// Unweighted mean of per-class F1 over the label space (plus any class
/// seen in gold or predictions).
pub fn macro_f1(records: &[GenerationRecord], label_space: Option<&BTreeSet<String>>) -> Result<f64> {
    non_empty(records)?;
    let classes = class_counts(records, label_space)?;
    let sum: f64 = classes
        .values()
        .map(|c| f1(ratio(c.tp, c.predicted), ratio(c.tp, c.support)))
        .sum();
    Ok(sum / classes.len() as f64)
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("need at least one positive and one negative label".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    Ok((pos, neg))
}

pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks (1-based) over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Pick the positive class of a binary label space: a conventional
/// positive name when present.
pub fn positive_label(space: &BTreeSet<String>) -> Option<String> {
    if space.len() != 2 {
        return None;
    }
    const NAMES: [&str; 5] = ["true", "yes", "positive", "entailment", "1"];
    space.iter().find(|l| NAMES.contains(&normalize(l).as_str())).cloned()
}

/// Hard-prediction scores (1 when the positive class was predicted) and
/// gold indicators for the positive class.
pub fn binary_scores(records: &[GenerationRecord], positive: &str) -> (Vec<f64>, Vec<bool>) {
    let pos = normalize(positive);
    records
        .iter()
        .map(|r| {
            let s = if label_of(&r.parsed).as_deref() == Some(pos.as_str()) { 1.0 } else { 0.0 };
            (s, label_of(&r.gold).as_deref() == Some(pos.as_str()))
        })
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AwarenessCounts {
    /// Inputs whose output was wrong (true negatives present).
    pub l_t: usize,
    /// Inputs whose output was right despite the negative examples.
    pub l_f: usize,
    /// Of `l_t`, how many the model flagged as negative.
    pub t: usize,
    /// Of `l_f`, how many the model flagged as not negative.
    pub f: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Awareness {
    pub true_rate: Option<f64>,
    pub fake_rate: Option<f64>,
    pub counts: AwarenessCounts,
}

pub fn awareness_rates(records: &[GenerationRecord]) -> Result<Awareness> {
    let mut c = AwarenessCounts {
        l_t: 0,
        l_f: 0,
        t: 0,
        f: 0,
    };
    for r in records {
        let claim = r
            .negativity_claim
            .ok_or_else(|| Error::Metric(format!("record `{}` has no negativity judgment", r.instance_id)))?;
        if r.correct {
            c.l_f += 1;
            if claim == NegativityClaim::NotNegative {
                c.f += 1;
            }
        } else {
            c.l_t += 1;
            if claim == NegativityClaim::Negative {
                c.t += 1;
            }
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(Awareness {
        true_rate: rate(c.t, c.l_t),
        fake_rate: rate(c.f, c.l_f),
        counts: c,
    })
}

/// Every metric that applies to one record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskKind,
    pub records: usize,
    pub failed: usize,
    pub micro: Prf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted: Option<Prf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub elements: BTreeMap<String, Prf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auprc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub awareness: Option<Awareness>,
}

impl MetricReport {
    /// The headline number for the task: macro F1 for inference, micro F1
    /// otherwise.
    pub fn primary(&self) -> f64 {
        match (self.task, self.macro_f1) {
            (TaskKind::NlInference, Some(m)) => m,
            _ => self.micro.f1,
        }
    }
}

pub fn score(task: TaskKind, records: &[GenerationRecord], label_space: Option<&BTreeSet<String>>) -> Result<MetricReport> {
    let micro = micro_prf(records)?;
    let single_label = records.iter().all(|r| label_of(&r.gold).is_some());
    let (weighted, macro_f1) = if single_label {
        (Some(weighted_prf(records, label_space)?), Some(macro_f1(records, label_space)?))
    } else {
        (None, None)
    };
    let mut elements = BTreeMap::new();
    if task == TaskKind::TripleExtraction && records.iter().all(|r| matches!(r.gold, ParsedAnswer::Triple(_))) {
        for (name, e) in [
            ("head", TripleElement::Head),
            ("relation", TripleElement::Relation),
            ("tail", TripleElement::Tail),
        ] {
            elements.insert(name.to_string(), element_prf(records, e)?);
        }
    }
    let (mut auroc_v, mut auprc_v) = (None, None);
    if let Some(pos) = label_space.and_then(positive_label) {
        let (s, l) = binary_scores(records, &pos);
        auroc_v = auroc(&s, &l).ok();
        auprc_v = auprc(&s, &l).ok();
    }
    let awareness = if records.iter().all(|r| r.negativity_claim.is_some()) {
        Some(awareness_rates(records)?)
    } else {
        None
    };
    Ok(MetricReport {
        task,
        records: records.len(),
        failed: records.iter().filter(|r| r.error.is_some()).count(),
        micro,
        weighted,
        macro_f1,
        elements,
        auroc: auroc_v,
        auprc: auprc_v,
        awareness,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn record(id: usize, parsed: ParsedAnswer, gold: ParsedAnswer) -> GenerationRecord {
        GenerationRecord {
            instance_id: format!("{id}"),
            backend: "test".into(),
            examples: vec![],
            prompt: String::new(),
            raw_output: String::new(),
            correct: parsed.matches(&gold),
            parsed,
            gold_value: String::new(),
            gold,
            negativity_claim: None,
            negativity_token: None,
            negativity_output: None,
            error: None,
            timing: Default::default(),
        }
    }

    pub fn label(s: &str) -> ParsedAnswer {
        ParsedAnswer::Label(s.into())
    }

    /// Records from a confusion matrix `m[gold][pred]` over `labels`.
    pub fn from_confusion(labels: &[&str], m: &[&[usize]]) -> Vec<GenerationRecord> {
        let mut out = Vec::new();
        for (g, row) in m.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    out.push(record(out.len(), label(labels[p]), label(labels[g])));
                }
            }
        }
        out
    }
}
