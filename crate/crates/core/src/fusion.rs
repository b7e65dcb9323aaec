//! Sentence fusion input formatting and the marker-linearized baseline.

use thiserror::Error;

use crate::backend::{BackendError, GenerationBackend};
use crate::model::{DataInstance, DecodeConfig, ModelError};

/// Task prefix for the fusion model input. One trailing space.
pub const FUSION_PREFIX: &str = "summarize: ";
/// Task prefix for the linearized baseline input.
pub const BASELINE_PREFIX: &str = "translate Graph to English:";

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no sentences to fuse")]
    NoSentences,
    #[error("sentence {0} is empty")]
    EmptySentence(usize),
    #[error("fusion input must start with {FUSION_PREFIX:?}")]
    MissingPrefix,
    #[error(transparent)]
    Decode(#[from] ModelError),
    #[error("backend failed: {0}")]
    Backend(#[from] BackendError),
    #[error("backend returned an empty output")]
    EmptyOutput,
}

/// `"summarize: "` followed by the sentences joined with single spaces.
pub fn build_fusion_input<S: AsRef<str>>(sentences: &[S]) -> Result<String, FusionError> {
    if sentences.is_empty() {
        return Err(FusionError::NoSentences);
    }
    if let Some(i) = sentences.iter().position(|s| s.as_ref().trim().is_empty()) {
        return Err(FusionError::EmptySentence(i));
    }
    let joined = sentences
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ");
    Ok(format!("{FUSION_PREFIX}{joined}"))
}

/// A formatted fusion input plus the decoding settings to run it with.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionRequest {
    input_text: String,
    decode: DecodeConfig,
}

impl FusionRequest {
    pub fn new(input_text: String, decode: DecodeConfig) -> Result<Self, FusionError> {
        if !input_text.starts_with(FUSION_PREFIX) {
            return Err(FusionError::MissingPrefix);
        }
        decode.validate()?;
        Ok(FusionRequest { input_text, decode })
    }

    pub fn from_sentences<S: AsRef<str>>(
        sentences: &[S],
        decode: DecodeConfig,
    ) -> Result<Self, FusionError> {
        FusionRequest::new(build_fusion_input(sentences)?, decode)
    }

    pub fn input_text(&self) -> &str {
        &self.input_text
    }

    pub fn decode(&self) -> &DecodeConfig {
        &self.decode
    }
}

/// Runs the fusion model and returns its best sequence, trimmed.
pub fn fuse(request: &FusionRequest, backend: &dyn GenerationBackend) -> Result<String, FusionError> {
    generate_trimmed(request.input_text(), request.decode(), backend)
}

/// Baseline generation over a linearized input built by
/// [`linearize_baseline`].
pub fn generate_from_linearized(
    linearized: &str,
    decode: &DecodeConfig,
    backend: &dyn GenerationBackend,
) -> Result<String, FusionError> {
    decode.validate()?;
    generate_trimmed(linearized, decode, backend)
}

fn generate_trimmed(
    input: &str,
    decode: &DecodeConfig,
    backend: &dyn GenerationBackend,
) -> Result<String, FusionError> {
    let output = backend.generate(input, decode)?;
    let output = output.trim();
    if output.is_empty() {
        return Err(FusionError::EmptyOutput);
    }
    Ok(output.to_string())
}

/// `translate Graph to English: <H> s <R> p <T> o ...` over the instance's
/// triples in order.
pub fn linearize_baseline(instance: &DataInstance) -> String {
    let mut out = String::from(BASELINE_PREFIX);
    for t in instance.triples() {
        out.push_str(" <H> ");
        out.push_str(t.subject());
        out.push_str(" <R> ");
        out.push_str(t.predicate());
        out.push_str(" <T> ");
        out.push_str(t.object());
    }
    out
}
