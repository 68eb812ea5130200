use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::prompt::{assemble_prompt, PromptSpec};
use super::Generator;
use crate::corpus::{parse_answer, Corpus, Instance, Instructions, ParsedAnswer};
use crate::error::{Error, Result};
use crate::retrieve::{Example, Retrieval};

/// Which literal token means "the example is negative".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativityMapping {
    /// "If it is negative, please output False".
    #[default]
    InstructionLiteral,
    /// "True - the retrieved example is negative".
    MetricProse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativityMode {
    /// Judgment requested in the task prompt itself.
    #[default]
    SameCall,
    /// A second prompt carrying the negativity instruction.
    SeparateCall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativityClaim {
    Negative,
    NotNegative,
    /// Asked, but no True/False token in the output.
    Unparsed,
}

/// Last standalone `true`/`false` token in the output, case-insensitive.
fn trailing_bool_token(raw: &str) -> Option<String> {
    raw.split(|c: char| !c.is_alphanumeric())
        .rev()
        .find(|t| t.eq_ignore_ascii_case("true") || t.eq_ignore_ascii_case("false"))
        .map(str::to_string)
}

pub fn parse_negativity(raw: &str, mapping: NegativityMapping) -> (NegativityClaim, Option<String>) {
    match trailing_bool_token(raw) {
        None => (NegativityClaim::Unparsed, None),
        Some(tok) => {
            let is_true = tok.eq_ignore_ascii_case("true");
            let negative = match mapping {
                NegativityMapping::InstructionLiteral => !is_true,
                NegativityMapping::MetricProse => is_true,
            };
            let claim = if negative {
                NegativityClaim::Negative
            } else {
                NegativityClaim::NotNegative
            };
            (claim, Some(tok))
        }
    }
}

/// Non-deterministic per-call telemetry, kept out of the record body so
/// record files stay byte-reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub latency_ms: u64,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub instance_id: String,
    pub backend: String,
    pub examples: Vec<String>,
    pub prompt: String,
    pub raw_output: String,
    pub parsed: ParsedAnswer,
    pub gold_value: String,
    pub gold: ParsedAnswer,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negativity_claim: Option<NegativityClaim>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negativity_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negativity_output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub k: usize,
    pub ask_negativity: bool,
    pub negativity_mapping: NegativityMapping,
    pub negativity_mode: NegativityMode,
    pub concurrency: usize,
    pub instructions: Instructions,
    /// Label space used for parsing; falls back to the test corpus's.
    pub label_space: Option<BTreeSet<String>>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            k: 1,
            ask_negativity: false,
            negativity_mapping: NegativityMapping::default(),
            negativity_mode: NegativityMode::default(),
            concurrency: 4,
            instructions: Instructions::default(),
            label_space: None,
        }
    }
}

/// Hook applied to retrieved examples before prompt assembly.
pub trait ExampleTransform: Send + Sync {
    fn transform(&self, examples: Vec<Example>) -> Result<Vec<Example>>;
}

pub struct Pipeline<'a> {
    pub retrieval: &'a Retrieval,
    pub generator: &'a Generator,
    pub options: PipelineOptions,
    pub transform: Option<&'a dyn ExampleTransform>,
    /// Called once per finished record, from worker threads.
    pub on_record: Option<&'a (dyn Fn(usize, &GenerationRecord) -> Result<()> + Sync)>,
    /// Remaining instance budget; an empty budget aborts with `Interrupted`.
    pub budget: Option<&'a AtomicUsize>,
}

impl<'a> Pipeline<'a> {
    pub fn new(retrieval: &'a Retrieval, generator: &'a Generator, options: PipelineOptions) -> Self {
        Pipeline {
            retrieval,
            generator,
            options,
            transform: None,
            on_record: None,
            budget: None,
        }
    }

    pub fn run(&self, test: &Corpus) -> Result<Vec<GenerationRecord>> {
        for e in &test.entries {
            if e.value.is_none() {
                return Err(Error::InvalidCorpus(format!(
                    "test instance `{}` has no gold value",
                    e.id
                )));
            }
        }
        let space = self.options.label_space.as_ref().or(test.label_space.as_ref());
        let done = AtomicUsize::new(0);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.options.concurrency.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            test.entries
                .par_iter()
                .enumerate()
                .map(|(i, inst)| {
                    if let Some(budget) = self.budget {
                        if budget
                            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1))
                            .is_err()
                        {
                            return Err(Error::Interrupted(done.load(Ordering::SeqCst)));
                        }
                    }
                    let rec = self.one(inst, test, space);
                    if let Some(cb) = self.on_record {
                        cb(i, &rec)?;
                    }
                    done.fetch_add(1, Ordering::SeqCst);
                    Ok(rec)
                })
                .collect()
        })
    }

    fn one(&self, inst: &Instance, test: &Corpus, space: Option<&BTreeSet<String>>) -> GenerationRecord {
        let task = test.task;
        let gold_value = inst.response().unwrap_or_default().to_string();
        let gold = parse_answer(task, &gold_value, space);
        let instruction = match inst.meta.as_ref().and_then(|m| m.get("instruction")) {
            Some(_) => inst.instruction(),
            None => self.options.instructions.get(inst.task).to_string(),
        };
        let mut rec = GenerationRecord {
            instance_id: inst.id.clone(),
            backend: self.generator.backend().id().to_string(),
            examples: Vec::new(),
            prompt: String::new(),
            raw_output: String::new(),
            parsed: ParsedAnswer::NoAnswer,
            gold_value,
            gold,
            correct: false,
            negativity_claim: None,
            negativity_token: None,
            negativity_output: None,
            error: None,
            timing: Timing::default(),
        };
        let ask = self.options.ask_negativity;
        if ask {
            rec.negativity_claim = Some(NegativityClaim::Unparsed);
        }

        let examples = self
            .retrieval
            .examples(&inst.key, self.options.k)
            .and_then(|ex| match self.transform {
                Some(t) => t.transform(ex),
                None => Ok(ex),
            });
        let examples = match examples {
            Ok(ex) => ex,
            Err(e) => {
                rec.error = Some(e.to_string());
                return rec;
            }
        };
        rec.examples = examples.iter().map(|e| e.id.clone()).collect();
        let same_call = ask && self.options.negativity_mode == NegativityMode::SameCall;
        rec.prompt = assemble_prompt(&PromptSpec::new(&instruction, &examples, inst.context(), same_call));

        match self.generator.generate(&rec.prompt) {
            Ok(g) => {
                rec.timing = Timing {
                    latency_ms: g.latency_ms,
                    cache_hit: g.cache_hit,
                };
                rec.raw_output = g.text;
            }
            Err(e) => {
                rec.error = Some(e.to_string());
                return rec;
            }
        }
        rec.parsed = parse_answer(task, &rec.raw_output, space);
        rec.correct = rec.parsed.matches(&rec.gold);

        if ask {
            let judged = if same_call {
                Some(rec.raw_output.clone())
            } else {
                let p = assemble_prompt(&PromptSpec::new(&instruction, &examples, inst.context(), true));
                match self.generator.generate(&p) {
                    Ok(g) => {
                        rec.negativity_output = Some(g.text.clone());
                        Some(g.text)
                    }
                    Err(e) => {
                        rec.error = Some(e.to_string());
                        None
                    }
                }
            };
            if let Some(text) = judged {
                let (claim, token) = parse_negativity(&text, self.options.negativity_mapping);
                rec.negativity_claim = Some(claim);
                rec.negativity_token = token;
            }
        }
        rec
    }
}

pub fn run_pipeline(
    test: &Corpus,
    retrieval: &Retrieval,
    generator: &Generator,
    options: &PipelineOptions,
) -> Result<Vec<GenerationRecord>> {
    Pipeline::new(retrieval, generator, options.clone()).run(test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TaskKind;
    use crate::generate::{MockEcho, MockFixed};
    use crate::perturb::corrupt;
    use crate::retrieve::{BuildContext, RetrieverRegistry, RetrieverSpec};
    use serde_json::json;
    use std::sync::Arc;

    fn fixture(n: usize) -> Corpus {
        let entries = (0..n)
            .map(|i| {
                Instance::new(
                    format!("{i:03}"),
                    TaskKind::TextClassification,
                    format!("sentence number w{i} about drug d{i}"),
                )
                .with_value(if i % 2 == 0 { "True" } else { "False" })
            })
            .collect();
        Corpus::from_instances("fx", TaskKind::TextClassification, entries).unwrap()
    }

    fn bm25(c: &Corpus) -> Retrieval {
        let reg = RetrieverRegistry::builtin();
        let r = reg
            .build(&RetrieverSpec::new("b", "bm25", json!({})), c, &BuildContext::default())
            .unwrap();
        Retrieval::new(Arc::new(c.clone()), r)
    }

    #[test]
    fn echo_on_self_containing_corpus_is_perfect() {
        let c = fixture(20);
        let g = Generator::uncached(Arc::new(MockEcho));
        let recs = run_pipeline(&c, &bm25(&c), &g, &PipelineOptions::default()).unwrap();
        assert_eq!(recs.len(), 20);
        assert!(recs.iter().all(|r| r.correct));
    }

    #[test]
    fn echo_on_fully_counterfactual_is_all_wrong() {
        let c = fixture(20);
        let cf = corrupt(&c, 1.0, 4).unwrap();
        let g = Generator::uncached(Arc::new(MockEcho));
        let recs = run_pipeline(&c, &bm25(&cf.corpus), &g, &PipelineOptions::default()).unwrap();
        let changed = cf.manifest.ids();
        for r in &recs {
            assert_eq!(r.correct, !changed.contains(r.instance_id.as_str()));
        }
        assert!(recs.iter().all(|r| !r.correct));
    }

    #[test]
    fn no_retrieval_with_fixed_backend() {
        let c = fixture(9);
        let gold0 = c.entries[0].value.clone().unwrap();
        let mut none = c.clone();
        none.kind = crate::corpus::CorpusKind::None;
        let g = Generator::uncached(Arc::new(MockFixed::new(&gold0)));
        let recs = run_pipeline(&c, &Retrieval::disabled(Arc::new(none)), &g, &PipelineOptions::default()).unwrap();
        let expected = c.entries.iter().filter(|e| e.value.as_deref() == Some(&gold0)).count();
        assert_eq!(recs.iter().filter(|r| r.correct).count(), expected);
        assert!(recs.iter().all(|r| r.examples.is_empty()));
    }

    #[test]
    fn deterministic_under_mocks() {
        let c = fixture(15);
        let g = Generator::uncached(Arc::new(MockEcho));
        let opts = PipelineOptions {
            concurrency: 3,
            ..PipelineOptions::default()
        };
        let a = run_pipeline(&c, &bm25(&c), &g, &opts).unwrap();
        let b = run_pipeline(&c, &bm25(&c), &g, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn negativity_claims_present_iff_asked() {
        let c = fixture(4);
        let g = Generator::uncached(Arc::new(MockFixed::new("True\nFalse - not a negative example")));
        let asked = PipelineOptions {
            ask_negativity: true,
            ..PipelineOptions::default()
        };
        let recs = run_pipeline(&c, &bm25(&c), &g, &asked).unwrap();
        assert!(recs.iter().all(|r| r.negativity_claim == Some(NegativityClaim::Negative)));
        assert!(recs[0].prompt.contains(super::super::NEGATIVITY_INSTRUCTION));
        let recs = run_pipeline(&c, &bm25(&c), &g, &PipelineOptions::default()).unwrap();
        assert!(recs.iter().all(|r| r.negativity_claim.is_none()));
    }

    #[test]
    fn separate_call_mode() {
        let c = fixture(3);
        let g = Generator::uncached(Arc::new(MockFixed::new("True")));
        let opts = PipelineOptions {
            ask_negativity: true,
            negativity_mode: NegativityMode::SeparateCall,
            negativity_mapping: NegativityMapping::MetricProse,
            ..PipelineOptions::default()
        };
        let recs = run_pipeline(&c, &bm25(&c), &g, &opts).unwrap();
        assert_eq!(g.backend_calls(), 6);
        assert!(recs.iter().all(|r| r.negativity_claim == Some(NegativityClaim::Negative)
            && !r.prompt.contains(super::super::NEGATIVITY_INSTRUCTION)));
    }

    #[test]
    fn negativity_token_mapping() {
        assert_eq!(
            parse_negativity("answer True. False", NegativityMapping::InstructionLiteral),
            (NegativityClaim::Negative, Some("False".into()))
        );
        assert_eq!(
            parse_negativity("False", NegativityMapping::MetricProse).0,
            NegativityClaim::NotNegative
        );
        assert_eq!(parse_negativity("dunno", NegativityMapping::MetricProse).0, NegativityClaim::Unparsed);
    }

    #[test]
    fn budget_interrupts() {
        let c = fixture(10);
        let g = Generator::uncached(Arc::new(MockEcho));
        let budget = AtomicUsize::new(3);
        let r = bm25(&c);
        let mut p = Pipeline::new(&r, &g, PipelineOptions::default());
        p.budget = Some(&budget);
        assert!(matches!(p.run(&c), Err(Error::Interrupted(_))));
    }

    struct Failing;
    impl crate::generate::Backend for Failing {
        fn id(&self) -> &str {
            "failing"
        }
        fn complete(&self, _: &str) -> Result<String> {
            Err(Error::Backend {
                backend: "failing".into(),
                msg: "down".into(),
            })
        }
    }

    #[test]
    fn backend_errors_become_failed_records() {
        let c = fixture(3);
        let g = Generator::uncached(Arc::new(Failing));
        let recs = run_pipeline(&c, &bm25(&c), &g, &PipelineOptions::default()).unwrap();
        assert!(recs.iter().all(|r| r.error.is_some() && !r.correct && r.parsed == ParsedAnswer::NoAnswer));
    }
}
