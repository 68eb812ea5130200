//! Prompt layout:
//!
//! ```text
//! <instruction>
//! Examples:
//! context: <key>
//! response: <value>
//! retrieved sentence: <key>          (example without a value)
//! <negativity instruction>           (only when asked)
//! context: <input context>
//! response:
//! ```
//!
//! The `Examples:` header appears only when there is at least one example.
//! Newlines inside fields are flattened to spaces so every field stays on
//! its own line.

use serde::{Deserialize, Serialize};

use crate::retrieve::Example;

pub const NEGATIVITY_INSTRUCTION: &str = "Please determine whether the retrieved example constitutes negative information. If it is negative, please output False; if it is not negative, please output True";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub instruction: String,
    pub examples: Vec<(String, Option<String>)>,
    pub context: String,
    pub ask_negativity: bool,
}

impl PromptSpec {
    pub fn new(instruction: &str, examples: &[Example], context: &str, ask_negativity: bool) -> Self {
        PromptSpec {
            instruction: instruction.to_string(),
            examples: examples.iter().map(|e| (e.key.clone(), e.value.clone())).collect(),
            context: context.to_string(),
            ask_negativity,
        }
    }
}

pub(crate) fn line(s: &str) -> String {
    s.replace(['\r', '\n'], " ")
}

pub fn assemble_prompt(spec: &PromptSpec) -> String {
    let mut out = line(spec.instruction.trim_end());
    out.push('\n');
    if !spec.examples.is_empty() {
        out.push_str("Examples:\n");
        for (key, value) in &spec.examples {
            match value {
                Some(v) => {
                    out.push_str(&format!("context: {}\nresponse: {}\n", line(key), line(v)));
                }
                None => out.push_str(&format!("retrieved sentence: {}\n", line(key))),
            }
        }
    }
    if spec.ask_negativity {
        out.push_str(NEGATIVITY_INSTRUCTION);
        out.push('\n');
    }
    out.push_str(&format!("context: {}\nresponse:", line(&spec.context)));
    out
}

/// Response value of the first example embedded in a prompt.
pub fn first_example_response(prompt: &str) -> Option<&str> {
    prompt.lines().find_map(|l| l.strip_prefix("response: "))
}
