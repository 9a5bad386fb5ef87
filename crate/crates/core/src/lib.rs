//! Section-wise prompt optimization for clinical note summarization.
//!
//! The crate is organised around the optimization pipeline:
//!
//! - [`corpus`] loads the dialogue/summary CSV, filters small sections and
//!   produces reproducible train/evaluation splits.
//! - [`llm_gateway`] is the chat-completion layer: an OpenAI-compatible HTTP
//!   backend, a scripted mock, a content-addressed response cache and
//!   self-consistency sampling.
//! - [`prompt_kit`] holds the forward, gradient and update templates and
//!   parses the dictionary-shaped replies they ask for.
//! - [`apo_engine`] runs the forward/backward loop per section and records
//!   the full prompt lineage.
//! - [`metrics`] implements ROUGE-1/2/L, a METEOR-style aligner and a
//!   lexicon-based concept F1.
//! - [`experiment_runner`] scores prompt groups and writes report tables.
//! - [`review_api`] serves the human review and blind preference workflow.
//!
//! Batch loops (scoring, validation, self-consistency draws, cross-section
//! work) go through [`par`], which uses rayon when the `parallel` feature is
//! enabled and plain iterators otherwise.

pub mod apo_engine;
pub mod corpus;
pub mod experiment_runner;
pub mod llm_gateway;
pub mod metrics;
pub mod par;
pub mod prompt_kit;
pub mod review_api;
pub mod rng;
pub mod run;
