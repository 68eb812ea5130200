use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TaskKind;

const TRIPLE_EXTRACTION: &str = include_str!("../../assets/instructions/triple-extraction.txt");
const LINK_PREDICTION: &str = include_str!("../../assets/instructions/link-prediction.txt");
const TEXT_CLASSIFICATION: &str = include_str!("../../assets/instructions/text-classification.txt");
const QUESTION_ANSWERING: &str = include_str!("../../assets/instructions/question-answering.txt");
const NL_INFERENCE: &str = include_str!("../../assets/instructions/nl-inference.txt");

/// Built-in instruction for a task kind.
pub fn default_instruction(task: TaskKind) -> &'static str {
    match task {
        TaskKind::TripleExtraction => TRIPLE_EXTRACTION,
        TaskKind::LinkPrediction => LINK_PREDICTION,
        TaskKind::TextClassification => TEXT_CLASSIFICATION,
        TaskKind::QuestionAnswering => QUESTION_ANSWERING,
        TaskKind::NlInference => NL_INFERENCE,
    }
}

/// Per-task instruction overrides layered over the built-in templates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Instructions {
    #[serde(flatten)]
    pub overrides: BTreeMap<TaskKind, String>,
}

impl Instructions {
    pub fn get(&self, task: TaskKind) -> &str {
        self.overrides
            .get(&task)
            .map(String::as_str)
            .unwrap_or_else(|| default_instruction(task))
    }
}
