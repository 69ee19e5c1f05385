use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::{StatusCode, Url};
use serde::{Deserialize, Serialize};

use super::{labels_from_top_logprobs, Backend, BackendError, GenerationRequest, GenerationResult};

/// Number of alternatives requested when reading label scores.
const LABEL_LOGPROBS: u32 = 20;

#[derive(Debug, Clone)]
pub struct HttpBackendOptions {
    pub timeout: Duration,
    pub max_retries: u32,
    /// First backoff delay; doubles after every failed attempt.
    pub backoff: Duration,
    pub concurrency: usize,
}

impl Default for HttpBackendOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff: Duration::from_millis(500),
            concurrency: 8,
        }
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    top_p: f64,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    #[serde(default)]
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    finish_reason: Option<String>,
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    top_logprobs: Vec<Option<HashMap<String, f64>>>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    completion_tokens: usize,
}

/// Counting semaphore bounding in-flight requests per backend.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Client for an OpenAI-compatible `/v1/completions` endpoint.
///
/// 4xx answers are configuration errors and are never retried. 5xx answers,
/// timeouts and connection failures are retried with exponential backoff up
/// to `max_retries` times.
pub struct HttpCompletionBackend {
    name: String,
    endpoint: Url,
    model: String,
    auth_token: Option<String>,
    client: Client,
    options: HttpBackendOptions,
    limiter: Limiter,
    retries: AtomicU64,
}

impl std::fmt::Debug for HttpCompletionBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpCompletionBackend")
            .field("name", &self.name)
            .field("endpoint", &self.endpoint.as_str())
            .field("model", &self.model)
            .finish()
    }
}

fn completions_url(endpoint: &str) -> Result<Url, BackendError> {
    let trimmed = endpoint.trim_end_matches('/');
    let full = if trimmed.ends_with("/v1/completions") {
        trimmed.to_owned()
    } else if trimmed.ends_with("/v1") {
        format!("{trimmed}/completions")
    } else {
        format!("{trimmed}/v1/completions")
    };
    let url = Url::parse(&full)
        .map_err(|e| BackendError::Config(format!("bad URL '{endpoint}': {e}")))?;
    if !matches!(url.scheme(), "http" | "https") {
        return Err(BackendError::Config(format!(
            "unsupported URL scheme in '{endpoint}'"
        )));
    }
    Ok(url)
}

impl HttpCompletionBackend {
    pub fn new(
        name: impl Into<String>,
        endpoint_url: &str,
        model_name: impl Into<String>,
        auth_token: Option<String>,
        options: HttpBackendOptions,
    ) -> Result<Self, BackendError> {
        let endpoint = completions_url(endpoint_url)?;
        let client = Client::builder()
            .timeout(options.timeout)
            .pool_max_idle_per_host(options.concurrency.max(1))
            .build()
            .map_err(|e| BackendError::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            name: name.into(),
            endpoint,
            model: model_name.into(),
            auth_token,
            client,
            limiter: Limiter::new(options.concurrency),
            options,
            retries: AtomicU64::new(0),
        })
    }

    /// Total retries performed over the backend's lifetime.
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    pub fn endpoint(&self) -> &str {
        self.endpoint.as_str()
    }

    fn post(&self, body: &CompletionRequest<'_>) -> Result<CompletionResponse, BackendError> {
        let _permit = self.limiter.acquire();
        let mut attempt: u32 = 0;
        loop {
            attempt += 1;
            match self.try_once(body) {
                Ok(r) => return Ok(r),
                Err(BackendError::Transport { message, .. })
                    if attempt <= self.options.max_retries =>
                {
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    let delay = self
                        .options
                        .backoff
                        .saturating_mul(1 << (attempt - 1).min(16));
                    tracing::warn!(backend = %self.name, attempt, ?delay, %message, "retrying completion request");
                    std::thread::sleep(delay);
                }
                Err(BackendError::Transport { message, .. }) => {
                    return Err(BackendError::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn try_once(&self, body: &CompletionRequest<'_>) -> Result<CompletionResponse, BackendError> {
        let mut req = self.client.post(self.endpoint.clone()).json(body);
        if let Some(token) = &self.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(BackendError::Transport {
                attempts: 1,
                message: format!("HTTP {status}"),
            });
        }
        if status.is_client_error() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Config(format!(
                "HTTP {status}: {}",
                text.trim()
            )));
        }
        if status != StatusCode::OK {
            return Err(BackendError::Protocol(format!("unexpected HTTP {status}")));
        }
        let text = resp.text().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Protocol(format!("bad completion body: {e}")))
    }
}

impl Backend for HttpCompletionBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let body = CompletionRequest {
            model: &self.model,
            prompt: &request.prompt,
            max_tokens: request.max_tokens,
            top_p: request.top_p,
            temperature: request.temperature,
            seed: request.seed,
            logprobs: None,
        };
        let resp = self.post(&body)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        let token_count = match (&resp.usage, &choice.logprobs) {
            (Some(u), _) => u.completion_tokens,
            (None, Some(lp)) if !lp.tokens.is_empty() => lp.tokens.len(),
            _ => {
                return Err(BackendError::Protocol(
                    "response reports neither usage nor tokens".into(),
                ))
            }
        };
        let finished = choice.finish_reason.as_deref() == Some("stop")
            || (token_count < request.max_tokens
                && choice.finish_reason.as_deref() != Some("length"));
        Ok(GenerationResult {
            text: choice.text,
            token_count,
            finished,
        })
    }

    fn next_label_logits(&self, prompt: &str, n: usize) -> Result<Vec<f64>, BackendError> {
        let body = CompletionRequest {
            model: &self.model,
            prompt,
            max_tokens: 1,
            top_p: 1.0,
            temperature: 0.0,
            seed: None,
            logprobs: Some(LABEL_LOGPROBS),
        };
        let resp = self.post(&body)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        let top = choice
            .logprobs
            .and_then(|lp| lp.top_logprobs.into_iter().next().flatten())
            .ok_or_else(|| BackendError::Capability(self.name.clone()))?;
        labels_from_top_logprobs(&top, n)
    }
}
