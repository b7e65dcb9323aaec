use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{clean_completion, BackendError, CompletionBackend, GenerationBackend};
use crate::disambiguation::PromptSpec;
use crate::fusion::FUSION_PREFIX;
use crate::model::{predicate_words, DecodeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownRequestPolicy {
    #[default]
    Error,
    Echo,
}

/// Lookup-table backend: request text → response text.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    fixtures: BTreeMap<String, String>,
    unknown: UnknownRequestPolicy,
    name: String,
}

impl MockBackend {
    pub fn new(fixtures: BTreeMap<String, String>, unknown: UnknownRequestPolicy) -> Self {
        MockBackend {
            fixtures,
            unknown,
            name: "mock:inline".into(),
        }
    }

    /// Loads a JSON object mapping request text to response text.
    pub fn from_fixture(path: &Path, unknown: UnknownRequestPolicy) -> Result<Self, BackendError> {
        let fixture_err = |message: String| BackendError::Fixture {
            path: path.display().to_string(),
            message,
        };
        let json = std::fs::read_to_string(path).map_err(|e| fixture_err(e.to_string()))?;
        let fixtures = serde_json::from_str(&json).map_err(|e| fixture_err(e.to_string()))?;
        Ok(MockBackend {
            fixtures,
            unknown,
            name: format!(
                "mock:{}",
                path.file_name().unwrap_or_default().to_string_lossy()
            ),
        })
    }

    fn lookup(&self, request: &str) -> Result<String, BackendError> {
        match (self.fixtures.get(request), self.unknown) {
            (Some(hit), _) => Ok(hit.clone()),
            (None, UnknownRequestPolicy::Echo) => Ok(request.to_string()),
            (None, UnknownRequestPolicy::Error) => Err(BackendError::Lookup(request.to_string())),
        }
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, prompt: &str, spec: &PromptSpec) -> Result<String, BackendError> {
        Ok(clean_completion(&self.lookup(prompt)?, &spec.stop_sequence))
    }

    fn identity(&self) -> String {
        self.name.clone()
    }
}

impl GenerationBackend for MockBackend {
    fn generate(&self, input: &str, _decode: &DecodeConfig) -> Result<String, BackendError> {
        self.lookup(input)
    }

    fn identity(&self) -> String {
        self.name.clone()
    }
}

/// Generation backend that returns its input minus the fusion prefix.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityBackend;

impl GenerationBackend for IdentityBackend {
    fn generate(&self, input: &str, _decode: &DecodeConfig) -> Result<String, BackendError> {
        Ok(input.strip_prefix(FUSION_PREFIX).unwrap_or(input).to_string())
    }

    fn identity(&self) -> String {
        "mock:identity".into()
    }
}

/// Completion backend that answers the last `Table: s | p | o` row of a
/// prompt with `" s <predicate words> o."`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TableEchoBackend;

impl CompletionBackend for TableEchoBackend {
    fn complete(&self, prompt: &str, spec: &PromptSpec) -> Result<String, BackendError> {
        let row = prompt
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("Table: "))
            .ok_or_else(|| BackendError::Lookup(prompt.to_string()))?;
        let fields: Vec<&str> = row.split(" | ").collect();
        let [s, p, o] = fields.as_slice() else {
            return Err(BackendError::Lookup(prompt.to_string()));
        };
        let raw = format!(" {s} {} {o}.\nTable:", predicate_words(p));
        Ok(clean_completion(&raw, &spec.stop_sequence))
    }

    fn identity(&self) -> String {
        "mock:table-echo".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordedRequest {
    Completion { prompt: String, spec: PromptSpec },
    Generation { input: String, decode: DecodeConfig },
}

/// Wraps a backend, recording each request and tracking peak concurrency.
#[derive(Debug, Default)]
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<RecordedRequest>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl<B> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            log: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.log.lock().expect("log poisoned").len()
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.log.lock().expect("log poisoned").clone()
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.log.lock().expect("log poisoned").clear();
        self.peak.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn track<R>(&self, request: RecordedRequest, call: impl FnOnce() -> R) -> R {
        self.log.lock().expect("log poisoned").push(request);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let out = call();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

impl<B: CompletionBackend> CompletionBackend for RecordingBackend<B> {
    fn complete(&self, prompt: &str, spec: &PromptSpec) -> Result<String, BackendError> {
        let request = RecordedRequest::Completion {
            prompt: prompt.to_string(),
            spec: spec.clone(),
        };
        self.track(request, || self.inner.complete(prompt, spec))
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

impl<B: GenerationBackend> GenerationBackend for RecordingBackend<B> {
    fn generate(&self, input: &str, decode: &DecodeConfig) -> Result<String, BackendError> {
        let request = RecordedRequest::Generation {
            input: input.to_string(),
            decode: decode.clone(),
        };
        self.track(request, || self.inner.generate(input, decode))
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}
