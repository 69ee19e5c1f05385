use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ScoreError;

/// Scores a response against a gold payload.
pub trait ResponseScorer: Send + Sync {
    fn score(&self, response: &str, gold: &Value) -> Result<f64, ScoreError>;
}

/// Adapts a closure into a [`ResponseScorer`].
pub struct FnScorer<F>(pub F);

impl<F> ResponseScorer for FnScorer<F>
where
    F: Fn(&str, &Value) -> Result<f64, ScoreError> + Send + Sync,
{
    fn score(&self, response: &str, gold: &Value) -> Result<f64, ScoreError> {
        (self.0)(response, gold)
    }
}

fn default_rel_tol() -> f64 {
    1e-6
}

fn default_choices() -> String {
    "ABCDEFGHIJ".to_owned()
}

fn default_timeout_secs() -> u64 {
    60
}

/// Scorer declaration, as found in task files and run configs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    #[default]
    ExactMatch,
    ContainsNormalized,
    NumericLast {
        #[serde(default = "default_rel_tol")]
        rel_tol: f64,
    },
    MultipleChoice {
        #[serde(default = "default_choices")]
        choices: String,
    },
    External {
        url: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        /// Upper bound on judge calls per second; 0 disables the limit.
        #[serde(default)]
        max_per_second: f64,
    },
}

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| !(c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())))
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:,\d{3})*(?:\.\d+)?").expect("static regex"))
}

/// Last number in `text`. A leading `-` counts as a sign only when it is
/// not glued to a preceding word or number (so `11-39` yields 39).
pub fn last_number(text: &str) -> Option<f64> {
    let m = number_re().find_iter(text).last()?;
    let magnitude: f64 = m.as_str().replace(',', "").parse().ok()?;
    let before = &text[..m.start()];
    let negative = before.ends_with('-')
        && !before[..before.len() - 1]
            .chars()
            .next_back()
            .is_some_and(|c| c.is_alphanumeric());
    Some(if negative { -magnitude } else { magnitude })
}

fn standalone(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    !before.is_some_and(|c| c.is_alphanumeric()) && !after.is_some_and(|c| c.is_alphanumeric())
}

/// Last choice letter in `text`. Letters marked as an answer (`X)`, `(X)`,
/// or following "answer is"/"answer:") take precedence over any other
/// standalone capital letter from the choice set.
pub fn last_choice_letter(text: &str, choices: &str) -> Option<char> {
    static CUE: OnceLock<Regex> = OnceLock::new();
    let cue = CUE.get_or_init(|| {
        Regex::new(r"(?i:answer)\s*(?:is|:)?\s*\(?([A-Z])\b|\(([A-Z])\)|\b([A-Z])\)")
            .expect("static regex")
    });
    let marked = cue
        .captures_iter(text)
        .filter_map(|c| c.get(1).or_else(|| c.get(2)).or_else(|| c.get(3)))
        .filter_map(|m| m.as_str().chars().next())
        .filter(|c| choices.contains(*c))
        .last();
    if marked.is_some() {
        return marked;
    }
    text.char_indices()
        .rev()
        .find(|(i, c)| {
            choices.contains(*c) && c.is_ascii_uppercase() && standalone(text, *i, i + c.len_utf8())
        })
        .map(|(_, c)| c)
}

fn gold_strings(gold: &Value) -> Result<Vec<String>, ScoreError> {
    match gold {
        Value::String(s) => Ok(vec![s.clone()]),
        Value::Number(n) => Ok(vec![n.to_string()]),
        Value::Array(items) if !items.is_empty() => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                other => Err(ScoreError::MalformedGold(format!(
                    "unsupported gold entry {other}"
                ))),
            })
            .collect(),
        other => Err(ScoreError::MalformedGold(format!(
            "expected string(s), got {other}"
        ))),
    }
}

fn gold_number(gold: &Value) -> Result<f64, ScoreError> {
    match gold {
        Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| ScoreError::MalformedGold(format!("unrepresentable number {n}"))),
        Value::String(s) => s
            .trim()
            .replace(',', "")
            .parse()
            .map_err(|_| ScoreError::MalformedGold(format!("'{s}' is not a number"))),
        other => Err(ScoreError::MalformedGold(format!(
            "expected a number, got {other}"
        ))),
    }
}

fn gold_letter(gold: &Value, choices: &str) -> Result<char, ScoreError> {
    let s = gold.as_str().ok_or_else(|| {
        ScoreError::MalformedGold(format!("expected a choice letter, got {gold}"))
    })?;
    let letters: Vec<char> = s.chars().filter(|c| c.is_ascii_alphabetic()).collect();
    match letters.as_slice() {
        [c] if choices.contains(c.to_ascii_uppercase()) => Ok(c.to_ascii_uppercase()),
        _ => Err(ScoreError::MalformedGold(format!(
            "'{s}' is not one of {choices}"
        ))),
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

struct ExternalJudge {
    url: String,
    client: reqwest::blocking::Client,
    min_interval: Option<Duration>,
    last_call: Mutex<Option<Instant>>,
}

impl ExternalJudge {
    fn pace(&self) {
        let Some(gap) = self.min_interval else { return };
        let mut last = self.last_call.lock().expect("judge lock");
        if let Some(t) = *last {
            let elapsed = t.elapsed();
            if elapsed < gap {
                std::thread::sleep(gap - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn judge(&self, response: &str, gold: &Value) -> Result<f64, ScoreError> {
        #[derive(Deserialize)]
        struct Verdict {
            score: f64,
        }
        self.pace();
        let resp = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({ "response": response, "gold": gold }))
            .send()
            .map_err(|e| ScoreError::External(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ScoreError::External(format!(
                "judge answered HTTP {}",
                resp.status()
            )));
        }
        let verdict: Verdict = resp
            .json()
            .map_err(|e| ScoreError::External(format!("bad judge body: {e}")))?;
        if !verdict.score.is_finite() {
            return Err(ScoreError::NonFinite);
        }
        Ok(verdict.score)
    }
}

/// Runtime scorer built from a [`ScorerSpec`].
pub struct Scorer {
    spec: ScorerSpec,
    judge: Option<ExternalJudge>,
}

impl std::fmt::Debug for Scorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scorer").field("spec", &self.spec).finish()
    }
}

impl Scorer {
    pub fn new(spec: ScorerSpec) -> Result<Self, ScoreError> {
        let judge = match &spec {
            ScorerSpec::External {
                url,
                timeout_secs,
                max_per_second,
            } => {
                reqwest::Url::parse(url)
                    .map_err(|e| ScoreError::Config(format!("judge URL '{url}': {e}")))?;
                let client = reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(*timeout_secs))
                    .build()
                    .map_err(|e| ScoreError::Config(e.to_string()))?;
                Some(ExternalJudge {
                    url: url.clone(),
                    client,
                    min_interval: (*max_per_second > 0.0)
                        .then(|| Duration::from_secs_f64(1.0 / max_per_second)),
                    last_call: Mutex::new(None),
                })
            }
            _ => None,
        };
        Ok(Self { spec, judge })
    }

    pub fn exact_match() -> Self {
        Self::new(ScorerSpec::ExactMatch).expect("built-in")
    }

    pub fn contains_normalized() -> Self {
        Self::new(ScorerSpec::ContainsNormalized).expect("built-in")
    }

    pub fn numeric_last() -> Self {
        Self::new(ScorerSpec::NumericLast {
            rel_tol: default_rel_tol(),
        })
        .expect("built-in")
    }

    pub fn multiple_choice() -> Self {
        Self::new(ScorerSpec::MultipleChoice {
            choices: default_choices(),
        })
        .expect("built-in")
    }

    pub fn spec(&self) -> &ScorerSpec {
        &self.spec
    }
}

impl ResponseScorer for Scorer {
    fn score(&self, response: &str, gold: &Value) -> Result<f64, ScoreError> {
        match &self.spec {
            ScorerSpec::ExactMatch => {
                let golds = gold_strings(gold)?;
                let r = normalize_answer(response);
                Ok(indicator(
                    !r.is_empty() && golds.iter().any(|g| normalize_answer(g) == r),
                ))
            }
            ScorerSpec::ContainsNormalized => {
                let golds = gold_strings(gold)?;
                let r = format!(" {} ", normalize_answer(response));
                Ok(indicator(golds.iter().any(|g| {
                    let g = normalize_answer(g);
                    !g.is_empty() && r.contains(&format!(" {g} "))
                })))
            }
            ScorerSpec::NumericLast { rel_tol } => {
                let want = gold_number(gold)?;
                Ok(indicator(last_number(response).is_some_and(|got| {
                    (got - want).abs() <= rel_tol * want.abs().max(1.0)
                })))
            }
            ScorerSpec::MultipleChoice { choices } => {
                let want = gold_letter(gold, choices)?;
                Ok(indicator(
                    last_choice_letter(response, choices) == Some(want),
                ))
            }
            ScorerSpec::External { .. } => self
                .judge
                .as_ref()
                .expect("judge built with spec")
                .judge(response, gold),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn numeric_last_examples() {
        let s = Scorer::numeric_last();
        assert_eq!(s.score("...the sum is 375", &json!(375)).unwrap(), 1.0);
        assert_eq!(
            s.score(
                "The sum of the odd integers from 11 through 39, inclusive, is 375.",
                &json!("375")
            )
            .unwrap(),
            1.0
        );
        assert_eq!(s.score("375 or maybe 376", &json!(375)).unwrap(), 0.0);
        assert_eq!(s.score("total: 1,234.5", &json!(1234.5)).unwrap(), 1.0);
        assert_eq!(s.score("no digits", &json!(1)).unwrap(), 0.0);
        assert_eq!(last_number("range 11-39"), Some(39.0));
        assert_eq!(last_number("it is -4"), Some(-4.0));
        assert!(matches!(
            s.score("1", &json!({"x": 1})),
            Err(ScoreError::MalformedGold(_))
        ));
    }

    #[test]
    fn multiple_choice_examples() {
        let s = Scorer::multiple_choice();
        let resp = "Both passages characterize the impact hypothesis as controversial within the scientific community. The correct answer is D. D) controversial in the scientific community.  The correct answer is D) controversial in the scientific community.";
        assert_eq!(s.score(resp, &json!("D")).unwrap(), 1.0);
        assert_eq!(
            s.score("The correct answer is D) controversial...", &json!("D"))
                .unwrap(),
            1.0
        );
        assert_eq!(
            s.score("I pick (B). A fine choice.", &json!("B")).unwrap(),
            1.0
        );
        assert_eq!(s.score("maybe C", &json!("(c)")).unwrap(), 1.0);
        assert_eq!(s.score("nothing here", &json!("A")).unwrap(), 0.0);
        assert!(s.score("x", &json!("Z")).is_err());
    }

    #[test]
    fn exact_and_contains() {
        let em = Scorer::exact_match();
        assert_eq!(em.score("", &json!("anything")).unwrap(), 0.0);
        assert_eq!(
            em.score("The  Eiffel Tower!", &json!("eiffel tower"))
                .unwrap(),
            1.0
        );
        assert_eq!(em.score("Paris", &json!(["London", "paris"])).unwrap(), 1.0);
        assert!(em.score("x", &Value::Null).is_err());
        let c = Scorer::contains_normalized();
        assert_eq!(
            c.score("I believe it's the Eiffel Tower.", &json!("Eiffel tower"))
                .unwrap(),
            1.0
        );
        assert_eq!(c.score("towering", &json!("tower")).unwrap(), 0.0);
        assert_eq!(c.score("anything", &json!("")).unwrap(), 0.0);
    }

    #[test]
    fn normalization() {
        assert_eq!(
            normalize_answer("  The Cat, a HAT; an end. "),
            "cat hat end"
        );
        assert_eq!(normalize_answer(""), "");
    }

    #[test]
    fn spec_from_task_json() {
        let s: ScorerSpec = serde_json::from_str(r#"{"kind":"numeric_last"}"#).unwrap();
        assert_eq!(s, ScorerSpec::NumericLast { rel_tol: 1e-6 });
        let s: ScorerSpec =
            serde_json::from_str(r#"{"kind":"multiple_choice","choices":"ABCD"}"#).unwrap();
        assert_eq!(
            s,
            ScorerSpec::MultipleChoice {
                choices: "ABCD".into()
            }
        );
        assert!(Scorer::new(ScorerSpec::External {
            url: "nope".into(),
            timeout_secs: 1,
            max_per_second: 0.0
        })
        .is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn builtins_are_total_and_bounded(s in "\\PC{0,60}") {
            let cases: [(Scorer, Value); 4] = [
                (Scorer::exact_match(), json!("x")),
                (Scorer::contains_normalized(), json!("x")),
                (Scorer::numeric_last(), json!(3)),
                (Scorer::multiple_choice(), json!("A")),
            ];
            for (scorer, gold) in cases {
                let v = scorer.score(&s, &gold).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
