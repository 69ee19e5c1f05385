//! Text generators and label-logit providers.
//!
//! A [`Backend`] produces one patch of continuation for a prompt and, when the
//! provider exposes log-probabilities, scores for the digit labels a switcher
//! emits. [`MockSkillBackend`] is a deterministic rule table for tests and
//! demos; [`HttpCompletionBackend`] speaks the OpenAI-compatible
//! `/v1/completions` protocol.

pub mod fixture;
mod http;
mod mock;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use http::{HttpBackendOptions, HttpCompletionBackend};
pub use mock::{MockEmission, MockRule, MockSkillBackend, Pattern};

use crate::domain::MAX_POOL_SIZE;

/// Gap below the weakest returned label assigned to labels the provider left out.
pub const MISSING_LABEL_GAP: f64 = 10.0;

/// Per-call sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub stop_on_eos: bool,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: usize) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            top_p: crate::domain::DEFAULT_TOP_P,
            temperature: 1.0,
            seed: None,
            stop_on_eos: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub token_count: usize,
    /// The model emitted end-of-sequence before reaching `max_tokens`.
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend '{0}' exposes no log-probabilities")]
    Capability(String),
    #[error("none of the {0} model labels appeared in the returned log-probabilities")]
    DegenerateLogits(usize),
    #[error("pool size {0} outside [1, {MAX_POOL_SIZE}]")]
    PoolSize(usize),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Transient failures worth another attempt.
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    /// One score per label `"0"..="n-1"` for the next token after `prompt`.
    fn next_label_logits(&self, prompt: &str, n: usize) -> Result<Vec<f64>, BackendError> {
        let _ = (prompt, n);
        Err(BackendError::Capability(self.name().to_owned()))
    }
}

/// Calls `backend.generate` with pre- and post-condition checks.
pub fn generate(
    backend: &dyn Backend,
    request: &GenerationRequest,
) -> Result<GenerationResult, BackendError> {
    if request.prompt.is_empty() {
        return Err(BackendError::InvalidRequest("empty prompt".into()));
    }
    if request.max_tokens == 0 {
        return Err(BackendError::InvalidRequest(
            "max_tokens must be >= 1".into(),
        ));
    }
    let result = backend.generate(request)?;
    if result.token_count > request.max_tokens {
        return Err(BackendError::Protocol(format!(
            "backend '{}' returned {} tokens for max_tokens={}",
            backend.name(),
            result.token_count,
            request.max_tokens
        )));
    }
    Ok(result)
}

/// Calls `backend.next_label_logits` and checks the pool size and the output length.
pub fn next_label_logits(
    backend: &dyn Backend,
    prompt: &str,
    n: usize,
) -> Result<Vec<f64>, BackendError> {
    if !(1..=MAX_POOL_SIZE).contains(&n) {
        return Err(BackendError::PoolSize(n));
    }
    let scores = backend.next_label_logits(prompt, n)?;
    if scores.len() != n {
        return Err(BackendError::Protocol(format!(
            "backend '{}' returned {} label scores for n={n}",
            backend.name(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(BackendError::Protocol(format!(
            "backend '{}' returned a non-finite label score",
            backend.name()
        )));
    }
    Ok(scores)
}

/// Maps a provider's top-logprob table onto the `n` digit labels.
///
/// Tokens are matched after trimming whitespace, so `" 1"` and `"1"` both
/// count as label 1 (the best of the two wins). Labels absent from the table
/// get `min(present) - MISSING_LABEL_GAP`.
pub fn labels_from_top_logprobs(
    top: &HashMap<String, f64>,
    n: usize,
) -> Result<Vec<f64>, BackendError> {
    if !(1..=MAX_POOL_SIZE).contains(&n) {
        return Err(BackendError::PoolSize(n));
    }
    let mut found: Vec<Option<f64>> = vec![None; n];
    for (token, &lp) in top {
        if !lp.is_finite() {
            continue;
        }
        let t = token.trim();
        if t.len() != 1 {
            continue;
        }
        if let Some(d) = t.chars().next().and_then(|c| c.to_digit(10)) {
            let d = d as usize;
            if d < n {
                found[d] = Some(found[d].map_or(lp, |prev: f64| prev.max(lp)));
            }
        }
    }
    let floor = found
        .iter()
        .flatten()
        .copied()
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.min(v)))
        })
        .ok_or(BackendError::DegenerateLogits(n))?
        - MISSING_LABEL_GAP;
    Ok(found.into_iter().map(|v| v.unwrap_or(floor)).collect())
}
