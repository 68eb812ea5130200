//! Answer grammars per task and the parser that maps raw model output onto
//! them. Parsing is total: anything unrecognisable becomes
//! [`ParsedAnswer::NoAnswer`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::TaskKind;
use crate::util::normalize;

/// A relation triple with every element case-folded and whitespace-collapsed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Triple {
            head: normalize(head),
            relation: normalize(relation),
            tail: normalize(tail),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "kebab-case")]
pub enum ParsedAnswer {
    Label(String),
    Triple(Triple),
    Option(char),
    NoAnswer,
}

impl ParsedAnswer {
    pub fn is_answer(&self) -> bool {
        !matches!(self, ParsedAnswer::NoAnswer)
    }

    /// Comparison rule used for scoring: case-insensitive and
    /// whitespace-normalized; `NoAnswer` never matches.
    pub fn matches(&self, gold: &ParsedAnswer) -> bool {
        match (self, gold) {
            (ParsedAnswer::Label(a), ParsedAnswer::Label(b)) => normalize(a) == normalize(b),
            (ParsedAnswer::Triple(a), ParsedAnswer::Triple(b)) => a == b,
            (ParsedAnswer::Option(a), ParsedAnswer::Option(b)) => a == b,
            _ => false,
        }
    }
}

/// Inverse of [`parse_answer`] on the answer grammar.
pub fn serialize_answer(answer: &ParsedAnswer) -> String {
    match answer {
        ParsedAnswer::Label(l) => l.clone(),
        ParsedAnswer::Triple(t) => format!("({}, {}, {})", t.head, t.relation, t.tail),
        ParsedAnswer::Option(c) => c.to_string(),
        ParsedAnswer::NoAnswer => String::new(),
    }
}

pub fn parse_answer(task: TaskKind, raw: &str, label_space: Option<&BTreeSet<String>>) -> ParsedAnswer {
    match task {
        TaskKind::TripleExtraction => parse_triple(raw),
        TaskKind::QuestionAnswering => parse_option(raw),
        TaskKind::TextClassification | TaskKind::LinkPrediction | TaskKind::NlInference => {
            match label_space {
                Some(space) if !space.is_empty() => parse_label(raw, space),
                _ => {
                    let n = normalize(raw);
                    if n.is_empty() {
                        ParsedAnswer::NoAnswer
                    } else {
                        ParsedAnswer::Label(n)
                    }
                }
            }
        }
    }
}

fn parse_triple(raw: &str) -> ParsedAnswer {
    let mut rest = raw;
    while let Some(open) = rest.find(['(', '{']) {
        let close_ch = if rest.as_bytes()[open] == b'(' { ')' } else { '}' };
        let after = &rest[open + 1..];
        let Some(close) = after.find(close_ch) else {
            break;
        };
        let parts: Vec<&str> = after[..close].split(',').map(str::trim).collect();
        if parts.len() == 3 && parts.iter().all(|p| !p.is_empty()) {
            return ParsedAnswer::Triple(Triple::new(parts[0], parts[1], parts[2]));
        }
        rest = &after[close + 1..];
    }
    ParsedAnswer::NoAnswer
}

fn parse_option(raw: &str) -> ParsedAnswer {
    let chars: Vec<char> = raw.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if !('A'..='E').contains(&c) {
            continue;
        }
        let before_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let after_ok = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        if before_ok && after_ok {
            return ParsedAnswer::Option(c);
        }
    }
    ParsedAnswer::NoAnswer
}

fn is_boundary(text: &str, byte: usize) -> bool {
    let before = text[..byte].chars().next_back();
    before.is_none_or(|c| !c.is_alphanumeric())
}

fn is_end_boundary(text: &str, byte: usize) -> bool {
    text[byte..].chars().next().is_none_or(|c| !c.is_alphanumeric())
}

/// Earliest label occurrence on word boundaries; at equal positions the
/// longest label wins.
fn parse_label(raw: &str, space: &BTreeSet<String>) -> ParsedAnswer {
    let hay = normalize(raw);
    let mut best: Option<(usize, usize, &String)> = None;
    for label in space {
        let needle = normalize(label);
        if needle.is_empty() {
            continue;
        }
        let mut from = 0;
        while let Some(pos) = hay[from..].find(&needle) {
            let start = from + pos;
            let end = start + needle.len();
            if is_boundary(&hay, start) && is_end_boundary(&hay, end) {
                let better = match best {
                    None => true,
                    Some((bs, blen, _)) => start < bs || (start == bs && needle.len() > blen),
                };
                if better {
                    best = Some((start, needle.len(), label));
                }
                break;
            }
            from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
        }
    }
    match best {
        Some((_, _, label)) => ParsedAnswer::Label(label.clone()),
        None => ParsedAnswer::NoAnswer,
    }
}
