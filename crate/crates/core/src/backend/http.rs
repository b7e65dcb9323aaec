use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{clean_completion, BackendError, CompletionBackend, GenerationBackend, Semaphore};
use crate::disambiguation::PromptSpec;
use crate::model::DecodeConfig;

/// An API key. Never printed by `Debug` or serialized.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Secret(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

fn default_timeout_secs() -> f64 {
    60.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_initial_ms() -> u64 {
    1000
}
fn default_backoff_multiplier() -> f64 {
    2.0
}
fn default_parallelism() -> usize {
    4
}

/// Endpoint and retry policy for one HTTP backend. `base_url` is the full
/// URL the JSON request is POSTed to.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub base_url: String,
    #[serde(skip)]
    pub api_key: Option<Secret>,
    /// Environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_initial_ms")]
    pub backoff_initial_ms: u64,
    #[serde(default = "default_backoff_multiplier")]
    pub backoff_multiplier: f64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl fmt::Debug for BackendConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "***"))
            .field("api_key_env", &self.api_key_env)
            .field("timeout_secs", &self.timeout_secs)
            .field("max_retries", &self.max_retries)
            .field("backoff_initial_ms", &self.backoff_initial_ms)
            .field("backoff_multiplier", &self.backoff_multiplier)
            .field("parallelism", &self.parallelism)
            .finish()
    }
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        BackendConfig {
            base_url: base_url.into(),
            api_key: None,
            api_key_env: None,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            backoff_initial_ms: default_backoff_initial_ms(),
            backoff_multiplier: default_backoff_multiplier(),
            parallelism: default_parallelism(),
        }
    }

    /// Fills `api_key` from `api_key_env` when it is not set yet.
    pub fn resolve_api_key(mut self) -> Self {
        if self.api_key.is_none() {
            if let Some(var) = &self.api_key_env {
                self.api_key = std::env::var(var).ok().filter(|k| !k.is_empty()).map(Secret);
            }
        }
        self
    }

    /// Full-jitter delay before retry number `retry` (0-based).
    pub fn backoff_delay(&self, retry: u32) -> Duration {
        let ceiling = self.backoff_initial_ms as f64 * self.backoff_multiplier.powi(retry as i32);
        let ceiling = ceiling.clamp(0.0, 10.0 * 60.0 * 1000.0) as u64;
        if ceiling == 0 {
            return Duration::ZERO;
        }
        Duration::from_millis(rand::rng().random_range(0..=ceiling))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Sends one JSON POST. Errors are connection-level failures; HTTP error
/// statuses come back as responses.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&Secret>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, String>;
}

#[derive(Debug, Default)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&Secret>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut request = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            request = request.header("Authorization", &format!("Bearer {}", key.expose()));
        }
        let mut response = request.send(body).map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Completion wire request: `{prompt, max_tokens, temperature, stop}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl CompletionRequest {
    pub fn new(prompt: &str, spec: &PromptSpec) -> Self {
        CompletionRequest {
            prompt: prompt.to_string(),
            max_tokens: spec.max_new_tokens,
            temperature: spec.temperature,
            stop: vec![spec.stop_sequence.clone()],
        }
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    text: String,
}

/// Generation wire request: `{inputs, num_beams, max_new_tokens, stop?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub inputs: Vec<String>,
    pub num_beams: u32,
    pub max_new_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<String>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub temperature: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl GenerationRequest {
    pub fn new(input: &str, decode: &DecodeConfig) -> Self {
        GenerationRequest {
            inputs: vec![input.to_string()],
            num_beams: decode.beam_width,
            max_new_tokens: decode.max_new_tokens,
            stop: decode.stop_sequence.clone(),
            temperature: decode.temperature,
        }
    }
}

#[derive(Deserialize)]
struct GenerationResponse {
    outputs: Vec<String>,
}

/// JSON-over-HTTP backend with retries and a per-backend concurrency cap.
/// The same client can serve as completion and generation backend; which
/// wire format is used depends on the trait method called.
pub struct HttpBackend {
    config: BackendConfig,
    transport: Box<dyn Transport>,
    permits: Semaphore,
    attempts: AtomicUsize,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("config", &self.config)
            .field("attempts", &self.attempts)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Self {
        HttpBackend::with_transport(config, Box::new(UreqTransport))
    }

    pub fn with_transport(config: BackendConfig, transport: Box<dyn Transport>) -> Self {
        let config = config.resolve_api_key();
        HttpBackend {
            permits: Semaphore::new(config.parallelism),
            config,
            transport,
            attempts: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// HTTP attempts made so far, retries included.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }

    /// POSTs `body`, retrying 429, 5xx and connection failures with
    /// exponential backoff. The same bytes are sent on every attempt.
    pub fn post_with_retry(&self, body: &str) -> Result<String, BackendError> {
        let _permit = self.permits.acquire();
        let timeout = Duration::from_secs_f64(self.config.timeout_secs.max(0.001));
        let max_attempts = self.config.max_retries as usize + 1;
        let mut last_error = String::new();
        for attempt in 0..max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff_delay(attempt as u32 - 1));
            }
            self.attempts.fetch_add(1, Ordering::SeqCst);
            match self.transport.post_json(
                &self.config.base_url,
                self.config.api_key.as_ref(),
                body,
                timeout,
            ) {
                Ok(resp) if (200..300).contains(&resp.status) => return Ok(resp.body),
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    log::debug!(
                        "{}: HTTP {} on attempt {}",
                        self.config.base_url,
                        resp.status,
                        attempt + 1
                    );
                    last_error = format!("HTTP {}: {}", resp.status, resp.body);
                }
                Ok(resp) => {
                    return Err(BackendError::Rejected {
                        status: resp.status,
                        body: resp.body,
                    })
                }
                Err(e) => {
                    log::debug!("{}: {e} on attempt {}", self.config.base_url, attempt + 1);
                    last_error = e;
                }
            }
        }
        Err(BackendError::Transport {
            attempts: max_attempts,
            message: last_error,
        })
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, prompt: &str, spec: &PromptSpec) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        let body = serde_json::to_string(&CompletionRequest::new(prompt, spec))
            .expect("request serializes");
        let raw = self.post_with_retry(&body)?;
        let parsed: CompletionResponse =
            serde_json::from_str(&raw).map_err(|e| BackendError::Response(e.to_string()))?;
        let first = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Response("no choices".into()))?;
        Ok(clean_completion(&first.text, &spec.stop_sequence))
    }

    fn identity(&self) -> String {
        format!("http:{}", self.config.base_url)
    }
}

impl GenerationBackend for HttpBackend {
    fn generate(&self, input: &str, decode: &DecodeConfig) -> Result<String, BackendError> {
        if input.is_empty() {
            return Err(BackendError::InvalidRequest("empty input".into()));
        }
        let body = serde_json::to_string(&GenerationRequest::new(input, decode))
            .expect("request serializes");
        let raw = self.post_with_retry(&body)?;
        let parsed: GenerationResponse =
            serde_json::from_str(&raw).map_err(|e| BackendError::Response(e.to_string()))?;
        parsed
            .outputs
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Response("no outputs".into()))
    }

    fn identity(&self) -> String {
        format!("http:{}", self.config.base_url)
    }
}
