use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, GenerationRequest, GenerationResult};
use crate::domain::sanitize_segment;

/// Context predicate evaluated against the full prompt a backend receives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Always,
    Contains(String),
    NotContains(String),
    StartsWith(String),
    EndsWith(String),
    Equals(String),
    AllOf(Vec<Pattern>),
    AnyOf(Vec<Pattern>),
}

impl Pattern {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Pattern::Always => true,
            Pattern::Contains(s) => prompt.contains(s.as_str()),
            Pattern::NotContains(s) => !prompt.contains(s.as_str()),
            Pattern::StartsWith(s) => prompt.starts_with(s.as_str()),
            Pattern::EndsWith(s) => prompt.ends_with(s.as_str()),
            Pattern::Equals(s) => prompt == s,
            Pattern::AllOf(ps) => ps.iter().all(|p| p.matches(prompt)),
            Pattern::AnyOf(ps) => ps.iter().any(|p| p.matches(prompt)),
        }
    }
}

/// What a mock produces when its rule fires.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEmission {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub tokens: usize,
    #[serde(default)]
    pub finished: bool,
    /// When set, the call fails with a transport error carrying this message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MockEmission {
    pub fn text(text: impl Into<String>, tokens: usize) -> Self {
        Self {
            text: text.into(),
            tokens,
            finished: false,
            error: None,
        }
    }

    pub fn finish(text: impl Into<String>, tokens: usize) -> Self {
        Self {
            finished: true,
            ..Self::text(text, tokens)
        }
    }

    pub fn eos() -> Self {
        Self::finish("", 0)
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            error: Some(message.into()),
            ..Self::text("", 0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub when: Pattern,
    #[serde(flatten)]
    pub emit: MockEmission,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelRule {
    when: Pattern,
    logits: Vec<f64>,
}

/// Deterministic generator driven by an ordered rule table; the first
/// matching rule wins, otherwise the default emission is used.
///
/// When an emission declares more tokens than the request allows, the text
/// is cut to the same fraction of its characters and `finished` is cleared.
#[derive(Debug, Default)]
pub struct MockSkillBackend {
    name: String,
    rules: Vec<MockRule>,
    default: Option<MockEmission>,
    label_table: HashMap<String, Vec<f64>>,
    label_rules: Vec<LabelRule>,
    label_default: Option<Vec<f64>>,
    generate_calls: AtomicUsize,
    label_calls: AtomicUsize,
}

impl Clone for MockSkillBackend {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            rules: self.rules.clone(),
            default: self.default.clone(),
            label_table: self.label_table.clone(),
            label_rules: self.label_rules.clone(),
            label_default: self.label_default.clone(),
            generate_calls: AtomicUsize::new(0),
            label_calls: AtomicUsize::new(0),
        }
    }
}

fn sanitized(mut e: MockEmission) -> MockEmission {
    e.text = sanitize_segment(&e.text);
    e
}

impl MockSkillBackend {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn rule(mut self, when: Pattern, emit: MockEmission) -> Self {
        self.rules.push(MockRule {
            when,
            emit: sanitized(emit),
        });
        self
    }

    pub fn with_rules(mut self, rules: impl IntoIterator<Item = MockRule>) -> Self {
        for r in rules {
            self = self.rule(r.when, r.emit);
        }
        self
    }

    pub fn default_emission(mut self, emit: MockEmission) -> Self {
        self.default = Some(sanitized(emit));
        self
    }

    /// Exact-prompt lookup for label scores.
    pub fn label_entry(mut self, prompt: impl Into<String>, logits: Vec<f64>) -> Self {
        self.label_table.insert(prompt.into(), logits);
        self
    }

    pub fn label_rule(mut self, when: Pattern, logits: Vec<f64>) -> Self {
        self.label_rules.push(LabelRule { when, logits });
        self
    }

    pub fn label_default(mut self, logits: Vec<f64>) -> Self {
        self.label_default = Some(logits);
        self
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::Relaxed)
    }

    pub fn label_calls(&self) -> usize {
        self.label_calls.load(Ordering::Relaxed)
    }

    fn emission_for(&self, prompt: &str) -> MockEmission {
        self.rules
            .iter()
            .find(|r| r.when.matches(prompt))
            .map(|r| r.emit.clone())
            .or_else(|| self.default.clone())
            .unwrap_or_else(MockEmission::eos)
    }
}

fn truncate_chars(text: &str, keep: usize, of: usize) -> String {
    let total = text.chars().count();
    let n = (total * keep).div_ceil(of.max(1));
    text.chars().take(n).collect()
}

impl Backend for MockSkillBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        self.generate_calls.fetch_add(1, Ordering::Relaxed);
        let e = self.emission_for(&request.prompt);
        if let Some(message) = e.error {
            return Err(BackendError::Transport {
                attempts: 1,
                message,
            });
        }
        if e.tokens > request.max_tokens {
            return Ok(GenerationResult {
                text: truncate_chars(&e.text, request.max_tokens, e.tokens),
                token_count: request.max_tokens,
                finished: false,
            });
        }
        Ok(GenerationResult {
            text: e.text,
            token_count: e.tokens,
            finished: e.finished,
        })
    }

    fn next_label_logits(&self, prompt: &str, n: usize) -> Result<Vec<f64>, BackendError> {
        self.label_calls.fetch_add(1, Ordering::Relaxed);
        let found = self
            .label_table
            .get(prompt)
            .or_else(|| {
                self.label_rules
                    .iter()
                    .find(|r| r.when.matches(prompt))
                    .map(|r| &r.logits)
            })
            .or(self.label_default.as_ref())
            .ok_or_else(|| BackendError::Capability(self.name.clone()))?;
        if found.len() != n {
            return Err(BackendError::Protocol(format!(
                "mock '{}' holds {} label scores, caller asked for {n}",
                self.name,
                found.len()
            )));
        }
        Ok(found.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{generate, next_label_logits};

    #[test]
    fn first_matching_rule_wins() {
        let m = MockSkillBackend::new("m")
            .rule(
                Pattern::Contains("STEP1".into()),
                MockEmission::text("STEP2", 1),
            )
            .rule(Pattern::Always, MockEmission::text("other", 1));
        let r = generate(&m, &GenerationRequest::new("...STEP1", 50)).unwrap();
        assert_eq!(r.text, "STEP2");
        assert!(!r.finished);
        let r = generate(&m, &GenerationRequest::new("nothing", 50)).unwrap();
        assert_eq!(r.text, "other");
        assert_eq!(m.generate_calls(), 2);
    }

    #[test]
    fn emission_is_capped_at_max_tokens() {
        let m =
            MockSkillBackend::new("m").default_emission(MockEmission::finish("abcdefghij", 100));
        let r = generate(&m, &GenerationRequest::new("p", 50)).unwrap();
        assert_eq!(r.token_count, 50);
        assert_eq!(r.text, "abcde");
        assert!(!r.finished);
    }

    #[test]
    fn empty_default_is_eos() {
        let m = MockSkillBackend::new("m");
        let r = generate(&m, &GenerationRequest::new("p", 50)).unwrap();
        assert_eq!(
            r,
            GenerationResult {
                text: String::new(),
                token_count: 0,
                finished: true
            }
        );
    }

    #[test]
    fn emissions_are_sanitized() {
        let m =
            MockSkillBackend::new("m").default_emission(MockEmission::text("a<model 1 ends>b", 2));
        assert_eq!(
            generate(&m, &GenerationRequest::new("p", 5)).unwrap().text,
            "ab"
        );
    }

    #[test]
    fn failure_emission_is_transport_error() {
        let m = MockSkillBackend::new("m").rule(
            Pattern::Contains("boom".into()),
            MockEmission::failure("down"),
        );
        let err = generate(&m, &GenerationRequest::new("boom", 5)).unwrap_err();
        assert!(err.is_retriable());
    }

    #[test]
    fn label_lookup_order() {
        let m = MockSkillBackend::new("s")
            .label_entry("exact", vec![2.0, 0.0, -1.0])
            .label_rule(Pattern::EndsWith("x".into()), vec![0.0, 1.0, 0.0])
            .label_default(vec![0.0, 0.0, 0.0]);
        assert_eq!(
            next_label_logits(&m, "exact", 3).unwrap(),
            vec![2.0, 0.0, -1.0]
        );
        assert_eq!(
            next_label_logits(&m, "abx", 3).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            next_label_logits(&m, "zzz", 3).unwrap(),
            vec![0.0, 0.0, 0.0]
        );
        assert!(matches!(
            next_label_logits(&m, "zzz", 2),
            Err(BackendError::Protocol(_))
        ));
        assert_eq!(
            next_label_logits(&m, "zzz", 11),
            Err(BackendError::PoolSize(11))
        );
        assert_eq!(m.label_calls(), 4);
    }

    #[test]
    fn pattern_serde_reads_config_syntax() {
        let rule: MockRule =
            toml::from_str("when = { ends_with = \"STEP1;\" }\ntext = \"STEP2;\"\ntokens = 3\n")
                .unwrap();
        assert_eq!(rule.when, Pattern::EndsWith("STEP1;".into()));
        assert_eq!(rule.emit, MockEmission::text("STEP2;", 3));
        let rule: MockRule = toml::from_str("when = \"always\"\nfinished = true\n").unwrap();
        assert_eq!(rule.emit, MockEmission::eos());
    }
}
