//! The switch-generation loop.
//!
//! One response is built patch by patch: pick a model (forced or via the
//! policy and nucleus selection), let it continue the undelimited text for
//! at most one patch, sanitize, append, repeat until a backend reports
//! end-of-sequence or the token budget is spent.

mod batch;

use serde::{Deserialize, Serialize};

pub use batch::{batch_generate, batch_generate_each};

use crate::backends::{self, BackendError, GenerationRequest};
use crate::domain::{
    plain_concat, sanitize_segment, CandidatePool, ConfigError, GenerationConfig, Query, Segment,
    Trace,
};
use crate::rng::SeedStream;
use crate::switcher::{select_top_p, SwitchContext, SwitchDecision, SwitchError, SwitchPolicy};

/// A finished (or aborted) response with its attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub query_id: String,
    #[serde(default)]
    pub task: String,
    pub instruction: String,
    pub trace: Trace,
    pub final_text: String,
    pub model_sequence: Vec<usize>,
    /// One entry per patch; `None` where the model was forced.
    pub decisions: Vec<Option<SwitchDecision>>,
    #[serde(default)]
    pub score: Option<f64>,
    /// Set when generation aborted; the trace holds what was produced.
    #[serde(default)]
    pub failure: Option<String>,
    pub config_snapshot: GenerationConfig,
}

impl GenerationRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Switch(#[from] SwitchError),
}

/// Result of asking one model for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchOutcome {
    pub segment: Segment,
    pub finished: bool,
}

impl PatchOutcome {
    /// Whether the segment carries anything worth appending.
    pub fn is_empty(&self) -> bool {
        self.segment.text.is_empty() && self.segment.token_count == 0
    }
}

/// Model forced at this position, if any: the pool's final model on the
/// first patch and on the last one, where "last" means the remaining budget
/// fits in a single patch.
pub fn forced_choice(
    pool: &CandidatePool,
    config: &GenerationConfig,
    patch_index: usize,
    remaining: usize,
) -> Option<usize> {
    if config.force_final_first_last && (patch_index == 0 || remaining <= config.patch_size) {
        Some(pool.final_index())
    } else {
        None
    }
}

/// Asks pool member `model` for one patch continuing `trace`.
///
/// The request seed derives from `stream` and the patch position, so the
/// same position always replays the same request. A transient failure is
/// retried once with the identical request.
pub fn generate_patch(
    query: &Query,
    pool: &CandidatePool,
    config: &GenerationConfig,
    trace: &Trace,
    model: usize,
    stream: &SeedStream,
) -> Result<PatchOutcome, BackendError> {
    let remaining = config
        .budget_for(query)
        .saturating_sub(trace.total_tokens());
    let request = GenerationRequest {
        prompt: plain_concat(query, trace),
        max_tokens: config.patch_size.min(remaining).max(1),
        top_p: config.top_p,
        temperature: config.temperature,
        seed: Some(stream.child("generate", trace.len() as u64).as_u64()),
        stop_on_eos: true,
    };
    let backend = pool.member(model).backend.as_ref();
    let result = match backends::generate(backend, &request) {
        Err(e) if e.is_retriable() => {
            tracing::warn!(model, error = %e, "patch failed, retrying once");
            backends::generate(backend, &request)?
        }
        other => other?,
    };
    // A patch that produced nothing would loop forever; treat it as the end.
    let finished = result.finished || result.token_count == 0;
    Ok(PatchOutcome {
        segment: Segment::new(model, sanitize_segment(&result.text), result.token_count),
        finished,
    })
}

/// Generation loop over an initial trace, stopping early once `stop`
/// holds at a patch boundary.
pub(crate) fn run_from(
    query: &Query,
    pool: &CandidatePool,
    policy: &dyn SwitchPolicy,
    config: &GenerationConfig,
    stream: &SeedStream,
    initial: Trace,
    stop: &dyn Fn(&Trace) -> bool,
) -> (Trace, Vec<Option<SwitchDecision>>, bool, Option<String>) {
    let budget = config.budget_for(query);
    let mut trace = initial;
    let mut decisions = Vec::new();
    let mut finished = false;
    let mut failure = None;

    while !stop(&trace) {
        let remaining = budget.saturating_sub(trace.total_tokens());
        if remaining == 0 {
            break;
        }
        let patch_index = trace.len();
        let (model, decision) = match forced_choice(pool, config, patch_index, remaining) {
            Some(m) => (m, None),
            None => {
                let ctx = SwitchContext {
                    query,
                    trace: &trace,
                    pool,
                    config,
                    stream,
                };
                let picked = policy.distribution(&ctx).and_then(|dist| {
                    let mut rng = stream.child("switch", patch_index as u64).rng();
                    select_top_p(&dist, config.top_p, &mut rng)
                });
                match picked {
                    Ok(d) => (d.chosen_index, Some(d)),
                    Err(e) => {
                        failure = Some(format!("policy '{}' failed: {e}", policy.name()));
                        break;
                    }
                }
            }
        };
        match generate_patch(query, pool, config, &trace, model, stream) {
            Ok(outcome) => {
                if !outcome.is_empty() {
                    trace.push(outcome.segment);
                    decisions.push(decision);
                }
                if outcome.finished {
                    finished = true;
                    break;
                }
            }
            Err(e) => {
                failure = Some(format!("backend '{}' failed: {e}", pool.member(model).name));
                break;
            }
        }
    }
    (trace, decisions, finished, failure)
}

/// Generates one full response for `query`.
///
/// Backend or policy failures do not surface as `Err`: the returned record
/// carries the partial trace and a `failure` message. `Err` means the
/// inputs were invalid.
pub fn switch_generate(
    query: &Query,
    pool: &CandidatePool,
    policy: &dyn SwitchPolicy,
    config: &GenerationConfig,
    stream: &SeedStream,
) -> Result<GenerationRecord, EngineError> {
    config.validate()?;
    query.validate()?;
    let (trace, decisions, _finished, failure) =
        run_from(query, pool, policy, config, stream, Trace::new(), &|_| {
            false
        });
    if let Some(f) = &failure {
        tracing::warn!(query = %query.id, failure = %f, "generation aborted");
    }
    Ok(GenerationRecord {
        query_id: query.id.clone(),
        task: query.task.clone(),
        instruction: query.instruction.clone(),
        final_text: trace.text(),
        model_sequence: trace.model_sequence(),
        trace,
        decisions,
        score: None,
        failure,
        config_snapshot: config.clone(),
    })
}
