//! Queries, model-attributed traces, candidate pools and generation settings.
//!
//! Everything here is an immutable value once built. The canonical JSON form
//! of a [`Trace`] writes each segment as `[model_index, text, token_count]`.

mod codec;

pub use codec::{
    is_delimiter_free, parse_attributed_trace, plain_concat, render_switcher_prompt,
    restore_token_counts, sanitize_segment, CodecError, ANSWER_CUE, CLOSING_QUESTION,
    MAX_POOL_SIZE,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::Backend;

/// Default token budget for one response.
pub const DEFAULT_MAX_NEW_TOKENS: usize = 512;
/// Default number of tokens per patch.
pub const DEFAULT_PATCH_SIZE: usize = 50;
/// Default nucleus threshold used for model selection and candidate sampling.
pub const DEFAULT_TOP_P: f64 = 0.7;

fn default_max_new_tokens() -> usize {
    DEFAULT_MAX_NEW_TOKENS
}

/// A single instruction to be answered by the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    #[serde(default)]
    pub task: String,
    pub instruction: String,
    /// Scorer-specific payload; opaque here.
    #[serde(default)]
    pub gold: serde_json::Value,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
}

impl Query {
    pub fn new(id: impl Into<String>, instruction: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            task: String::new(),
            instruction: instruction.into(),
            gold: serde_json::Value::Null,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }

    pub fn with_task(mut self, task: impl Into<String>) -> Self {
        self.task = task.into();
        self
    }

    pub fn with_gold(mut self, gold: serde_json::Value) -> Self {
        self.gold = gold;
        self
    }

    pub fn with_max_new_tokens(mut self, max_new_tokens: usize) -> Self {
        self.max_new_tokens = max_new_tokens;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.instruction.is_empty() {
            return Err(ConfigError::Invalid(format!(
                "query '{}' has an empty instruction",
                self.id
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(ConfigError::Invalid(format!(
                "query '{}' has max_new_tokens = 0",
                self.id
            )));
        }
        Ok(())
    }
}

/// A piece of response text produced by one pool member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, String, usize)", into = "(usize, String, usize)")]
pub struct Segment {
    pub model_index: usize,
    pub text: String,
    /// Token count as reported by the producing backend.
    pub token_count: usize,
}

impl Segment {
    pub fn new(model_index: usize, text: impl Into<String>, token_count: usize) -> Self {
        Self {
            model_index,
            text: text.into(),
            token_count,
        }
    }
}

impl From<(usize, String, usize)> for Segment {
    fn from((model_index, text, token_count): (usize, String, usize)) -> Self {
        Self {
            model_index,
            text,
            token_count,
        }
    }
}

impl From<Segment> for (usize, String, usize) {
    fn from(s: Segment) -> Self {
        (s.model_index, s.text, s.token_count)
    }
}

/// The model-attributed partial response generated so far.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TraceRepr", into = "TraceRepr")]
pub struct Trace {
    segments: Vec<Segment>,
    total_tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct TraceRepr {
    segments: Vec<Segment>,
    total_tokens: usize,
}

impl TryFrom<TraceRepr> for Trace {
    type Error = String;

    fn try_from(repr: TraceRepr) -> Result<Self, Self::Error> {
        let trace = Trace::from_segments(repr.segments);
        if trace.total_tokens != repr.total_tokens {
            return Err(format!(
                "total_tokens {} does not match segment sum {}",
                repr.total_tokens, trace.total_tokens
            ));
        }
        Ok(trace)
    }
}

impl From<Trace> for TraceRepr {
    fn from(t: Trace) -> Self {
        TraceRepr {
            segments: t.segments,
            total_tokens: t.total_tokens,
        }
    }
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_segments(segments: Vec<Segment>) -> Self {
        let total_tokens = segments.iter().map(|s| s.token_count).sum();
        Self {
            segments,
            total_tokens,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn push(&mut self, segment: Segment) {
        self.total_tokens += segment.token_count;
        self.segments.push(segment);
    }

    /// Returns a copy of this trace with `segment` appended.
    pub fn extended(&self, segment: Segment) -> Self {
        let mut t = self.clone();
        t.push(segment);
        t
    }

    /// Concatenation of all segment texts, i.e. the response so far.
    pub fn text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn model_sequence(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.model_index).collect()
    }
}

/// Errors raised while validating configuration values.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown backend '{0}'")]
    UnknownBackend(String),
}

/// One member of a [`CandidatePool`].
#[derive(Clone)]
pub struct PoolMember {
    pub name: String,
    pub backend: Arc<dyn Backend>,
}

impl std::fmt::Debug for PoolMember {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PoolMember")
            .field("name", &self.name)
            .finish()
    }
}

/// Ordered set of generator backends. A member's index is its identity in
/// switcher prompts and datasets, so the order never changes after build.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    members: Vec<PoolMember>,
    final_index: usize,
}

impl CandidatePool {
    pub fn new(members: Vec<PoolMember>, final_index: usize) -> Result<Self, ConfigError> {
        if members.is_empty() || members.len() > MAX_POOL_SIZE {
            return Err(ConfigError::Invalid(format!(
                "pool size must be in [1, {MAX_POOL_SIZE}], got {}",
                members.len()
            )));
        }
        if final_index >= members.len() {
            return Err(ConfigError::Invalid(format!(
                "final_index {final_index} out of range for pool of {}",
                members.len()
            )));
        }
        Ok(Self {
            members,
            final_index,
        })
    }

    /// Builds a pool from `(name, backend)` pairs.
    pub fn from_backends<I, S>(backends: I, final_index: usize) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (S, Arc<dyn Backend>)>,
        S: Into<String>,
    {
        let members = backends
            .into_iter()
            .map(|(name, backend)| PoolMember {
                name: name.into(),
                backend,
            })
            .collect();
        Self::new(members, final_index)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn final_index(&self) -> usize {
        self.final_index
    }

    pub fn member(&self, index: usize) -> &PoolMember {
        &self.members[index]
    }

    pub fn members(&self) -> &[PoolMember] {
        &self.members
    }

    pub fn names(&self) -> Vec<&str> {
        self.members.iter().map(|m| m.name.as_str()).collect()
    }
}

/// Sampling and budget settings for one switch-generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub patch_size: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Forces the pool's final model onto the first and the last patch.
    pub force_final_first_last: bool,
    /// Sampling temperature passed to candidate generators.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            top_p: DEFAULT_TOP_P,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            force_final_first_last: true,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.patch_size == 0 {
            return Err(ConfigError::Invalid("patch_size must be >= 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(ConfigError::Invalid("max_new_tokens must be >= 1".into()));
        }
        if self.patch_size > self.max_new_tokens {
            return Err(ConfigError::Invalid(format!(
                "patch_size {} exceeds max_new_tokens {}",
                self.patch_size, self.max_new_tokens
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "temperature must be a nonnegative finite number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Effective token budget for `query`: the tighter of the run and query limits.
    pub fn budget_for(&self, query: &Query) -> usize {
        self.max_new_tokens.min(query.max_new_tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = GenerationConfig::default();
        assert_eq!(c.patch_size, 50);
        assert_eq!(c.top_p, 0.7);
        assert_eq!(c.max_new_tokens, 512);
        assert!(c.force_final_first_last);
        c.validate().unwrap();
    }

    #[test]
    fn trace_json_uses_tuple_segments() {
        let t = Trace::from_segments(vec![Segment::new(1, "A", 3), Segment::new(0, "B", 2)]);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(
            json,
            r#"{"segments":[[1,"A",3],[0,"B",2]],"total_tokens":5}"#
        );
        let back: Trace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn trace_json_rejects_inconsistent_total() {
        let bad = r#"{"segments":[[1,"A",3]],"total_tokens":4}"#;
        assert!(serde_json::from_str::<Trace>(bad).is_err());
    }

    #[test]
    fn query_defaults_budget() {
        let q: Query = serde_json::from_str(r#"{"id":"a","instruction":"hi"}"#).unwrap();
        assert_eq!(q.max_new_tokens, 512);
        assert!(q.gold.is_null());
        q.validate().unwrap();
        assert!(Query::new("b", "").validate().is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        let c = GenerationConfig {
            patch_size: 600,
            ..GenerationConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = GenerationConfig {
            top_p: 0.0,
            ..GenerationConfig::default()
        };
        assert!(c.validate().is_err());
        c.top_p = 1.0;
        c.validate().unwrap();
    }
}
