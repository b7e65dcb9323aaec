//! Two-stage data-to-text generation.
//!
//! Triples are first verbalized one at a time with per-predicate templates
//! mined from an LLM ([`disambiguation`]), then the short sentences are fused
//! into a paragraph by a text-to-text model ([`fusion`]). [`corpus`] reads the
//! benchmark formats, [`metrics`] scores outputs, and [`harness`] runs whole
//! experiments.

pub mod backend;
pub mod corpus;
pub mod disambiguation;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod model;

pub use model::{
    normalize_field, predicate_words, DataInstance, DecodeConfig, DisambiguatedSentence,
    ModelError, Provenance, Split, Template, Triple,
};
