//! Backends for the two generation stages: completion (disambiguation LLM)
//! and text-to-text generation (fusion model). HTTP clients live in
//! [`http`], deterministic offline stand-ins in [`mock`].

mod http;
mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;

use thiserror::Error;

use crate::disambiguation::PromptSpec;
use crate::model::DecodeConfig;

pub use http::{
    BackendConfig, CompletionRequest, GenerationRequest, HttpBackend, HttpResponse, Secret,
    Transport, UreqTransport,
};
pub use mock::{
    IdentityBackend, MockBackend, RecordedRequest, RecordingBackend, TableEchoBackend,
    UnknownRequestPolicy,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Response(String),
    #[error("backend returned an empty output")]
    EmptyOutput,
    #[error("no fixture entry for request {0:?}")]
    Lookup(String),
    #[error("fixture {path}: {message}")]
    Fixture { path: String, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Completion-style LLM used for triple disambiguation.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, prompt: &str, spec: &PromptSpec) -> Result<String, BackendError>;

    /// Name recorded in run manifests. Must not contain credentials.
    fn identity(&self) -> String;
}

/// Text-to-text model used for sentence fusion.
pub trait GenerationBackend: Send + Sync {
    fn generate(&self, input: &str, decode: &DecodeConfig) -> Result<String, BackendError>;

    fn identity(&self) -> String;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for &B {
    fn complete(&self, prompt: &str, spec: &PromptSpec) -> Result<String, BackendError> {
        (**self).complete(prompt, spec)
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for &B {
    fn generate(&self, input: &str, decode: &DecodeConfig) -> Result<String, BackendError> {
        (**self).generate(input, decode)
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}

/// Cuts a raw completion at the stop sequence and drops leading whitespace.
pub fn clean_completion(raw: &str, stop: &str) -> String {
    let cut = if stop.is_empty() {
        raw
    } else {
        raw.split(stop).next().unwrap_or(raw)
    };
    cut.trim_start().to_string()
}

/// Maps `f` over `items` with at most `parallelism` calls in flight. Results
/// come back in input order.
pub fn map_bounded<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = parallelism.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let result = f(item);
                slots.lock().expect("result slots poisoned")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

/// Counting semaphore capping concurrent requests per backend.
#[derive(Debug)]
pub(crate) struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

pub(crate) struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub(crate) fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.available.notify_one();
    }
}
