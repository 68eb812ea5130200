//! Robustness harness for retrieval-augmented language models.
//!
//! The crate builds perturbed retrieval corpora (unlabeled, counterfactual,
//! diverse, negative), runs the retrieve → prompt → generate → score loop
//! against pluggable LLM backends, and scores the results with task and
//! negative-awareness metrics. Two remedies are included: LLM-judged label
//! correction of retrieved examples and a triplet-loss trained example
//! selector.
//!
//! Interchangeable pieces (retrievers, LLM backends, embedding providers)
//! sit behind traits and are looked up by name in registries, so a run
//! configuration selects them with plain strings.

pub mod correct;
pub mod corpus;
pub mod error;
pub mod generate;
pub mod metrics;
pub mod perturb;
pub mod retrieve;
pub mod rng;
pub mod runner;
pub mod select;
pub mod util;

pub use error::{Error, Result};
